"""
Simulation studies - generators and experiment runners
"""
