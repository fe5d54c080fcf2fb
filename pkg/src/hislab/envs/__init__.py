from .base import ENV_IDS, Env, EnvSpec, advance_hybrid, generate_recorded_db, make_env
from .pushslide import PushBoxEnv, SlideDiskEnv
from .volley import VolleyEnv

__all__ = [
    "ENV_IDS",
    "Env",
    "EnvSpec",
    "PushBoxEnv",
    "SlideDiskEnv",
    "VolleyEnv",
    "advance_hybrid",
    "generate_recorded_db",
    "make_env",
]
