"""Signal model, estimators and bounds"""
