"""Bird's-eye-view traffic trajectory pipeline and intersection behaviour prediction."""
__version__ = "0.1.0"
