"""
Model configuration, data ingestion and reports
"""
