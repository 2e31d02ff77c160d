from .dgp import *
