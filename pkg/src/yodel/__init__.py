"""Name-based multi-domain multicast in a deterministic discrete-event simulator.

The package splits along the architecture's seams: node identity (ynid),
wire formats (codec), tenancy records (model), the split controller
(control), node state machines (dataplane), service-model policy
(services), host-twin resiliency (twin), the simulator (sim, scenario)
and a thin CLI (cli).
"""

from .ynid import Yni, generate_yni, parse_yni, render_yni

__version__ = "0.1.0"

__all__ = ["Yni", "generate_yni", "parse_yni", "render_yni", "__version__"]
