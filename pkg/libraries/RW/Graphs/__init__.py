from .causal_graphs import *
