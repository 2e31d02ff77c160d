"""strata-lab command line."""
