"""Radar + PPG pediatric sleep apnea screening and sleep staging."""
