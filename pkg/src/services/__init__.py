"""Experiment orchestration and reporting"""
