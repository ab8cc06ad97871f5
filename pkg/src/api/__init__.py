"""HTTP surface over the experiment service"""
