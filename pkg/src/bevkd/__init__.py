"""Cross-modal knowledge distillation for multi-camera BEV 3D detection,
scaled to a synthetic desk-size world."""

__version__ = "0.1.0"
