"""Protocol name -> replica class."""

from .classic import FaBReplica, PBFTReplica
from .hotstuff import HotStuffReplica, ThemisReplica
from .linear import FLBReplica, SBFTReplica
from .tree import FTBReplica, KauriReplica
from .speculative import PoEReplica, Zyzzyva5Replica, ZyzzyvaReplica

REPLICAS = {
    "PBFT": PBFTReplica,
    "FaB": FaBReplica,
    "Zyzzyva": ZyzzyvaReplica,
    "Zyzzyva5": Zyzzyva5Replica,
    "PoE": PoEReplica,
    "SBFT": SBFTReplica,
    "FLB": FLBReplica,
    "Kauri": KauriReplica,
    "HotStuff": HotStuffReplica,
    "Themis": ThemisReplica,
    "FTB": FTBReplica,
}
