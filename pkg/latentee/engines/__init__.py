"""
Estimation engines
"""
