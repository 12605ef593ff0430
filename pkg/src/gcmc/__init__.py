"""Desk-scale learned image codec with a gated 3-d context model and embedded hyperpriors."""
