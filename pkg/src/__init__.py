"""Near-field multi-MS position and attitude estimation"""
