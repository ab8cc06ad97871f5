"""Application settings and INI experiment files"""
