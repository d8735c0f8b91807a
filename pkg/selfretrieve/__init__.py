from selfretrieve.image import augment, netpbm, proposals
from selfretrieve.model import boost, checkpoint, encoder, ssl
from selfretrieve.search import diffusion, evaluate, manifest
from selfretrieve.util import synthgen

__all__ = [
    "augment",
    "boost",
    "checkpoint",
    "diffusion",
    "encoder",
    "evaluate",
    "manifest",
    "netpbm",
    "proposals",
    "ssl",
    "synthgen",
]
