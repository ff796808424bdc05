from importlib.metadata import version as _v

try:
    __version__ = _v("kgconnection")
except Exception:  # pragma: no cover
    __version__ = "0.1.0"
