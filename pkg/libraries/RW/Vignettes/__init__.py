from .vignettes import *
