"""Valid CATE bounds from complex instruments via learned discrete representations."""

__version__ = "0.1.0"
