"""Pydantic models for scenarios, estimators and results"""
