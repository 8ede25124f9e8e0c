"""Variational Bayes for mixed multinomial logit models."""
