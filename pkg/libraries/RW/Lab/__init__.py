from .errors import *
from .lab_utils import *
