"""
Integration tests package initialization
"""
