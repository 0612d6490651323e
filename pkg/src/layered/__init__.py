from .core import *
from .oracle import *
from .dual import *
from .perturbation import *
from .planner import *
from .tracking import *
from .pipeline import *
from .errors import *
