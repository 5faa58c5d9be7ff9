"""Single-shot detection of arousals and leg movements in polysomnography."""

__version__ = "0.1.0"
