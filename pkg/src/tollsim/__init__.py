"""Online toll learning for capacitated road networks with heterogeneous users."""
from tollsim.network import Network, Path, PathList, TntpParseError, cheapest_paths, enumerate_paths, load_tntp, shortest_path

__version__ = "0.1.0"
