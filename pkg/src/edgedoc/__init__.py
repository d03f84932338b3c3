"""EdgeDoc: document forgery detection and localization on a numpy autodiff core."""

__version__ = "0.1.0"
