"""Statistical and exhaustive model checking for hybrid timed automata
whose continuous variables follow Keplerian true-anomaly dynamics."""

__version__ = "0.1.0"
