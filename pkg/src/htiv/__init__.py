"""Horvitz-Thompson instrumental-variable estimators for factorial and panel experiments."""
