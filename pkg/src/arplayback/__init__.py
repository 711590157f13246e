"""Setup-invariant recording and AR playback of robot instrument motion."""

__version__ = "0.1.0"
