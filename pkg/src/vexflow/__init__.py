"""Variable-exponent non-Newtonian flow toolkit."""
