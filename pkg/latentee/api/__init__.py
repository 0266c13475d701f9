"""
API module exports
"""
from latentee.api import routes

__all__ = ["routes"]
