"""Time reversal of one-dimensional piecewise deterministic Markov processes."""
