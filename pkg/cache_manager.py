"""
On-disk cache of precomputed split-sum LUTs
Avoids re-integrating the table on every CLI call
"""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from brdf_lut import EnvBrdfLut, load_lut, precompute_lut, save_lut
from config import LutSettings, config_manager
from errors import FormatError
from setup_environment import log_event, runtime_settings

logger = logging.getLogger(__name__)


@dataclass
class CacheEntry:
    """Metadata stored next to a cached LUT"""
    key: str
    size: int
    samples: int
    seed: int
    sampler: str
    ndotv_floor: float
    created_at: float

    @property
    def age_minutes(self) -> float:
        return (time.time() - self.created_at) / 60

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CacheEntry':
        return cls(**data)


class CacheManager:
    """Stores LUTs under `<cache_dir>/lut_<key>.bin` with a JSON sidecar"""

    def __init__(self, cache_dir: Optional[Path] = None):
        self._cache_dir = Path(cache_dir) if cache_dir else None

    @property
    def cache_dir(self) -> Path:
        if self._cache_dir is None:
            return config_manager.cache_dir
        self._cache_dir.mkdir(parents=True, exist_ok=True)
        return self._cache_dir

    @staticmethod
    def cache_key(settings: LutSettings) -> str:
        """Hash of every parameter that changes the table contents"""
        payload = json.dumps({
            'size': settings.size,
            'samples': settings.samples,
            'seed': settings.seed,
            'sampler': settings.sampler,
            'ndotv_floor': settings.ndotv_floor,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

    def _lut_file(self, key: str) -> Path:
        return self.cache_dir / f"lut_{key}.bin"

    def _meta_file(self, key: str) -> Path:
        return self.cache_dir / f"lut_{key}.json"

    def get(self, settings: LutSettings) -> Optional[EnvBrdfLut]:
        """Cached table for `settings`, or None"""
        key = self.cache_key(settings)
        lut_file = self._lut_file(key)
        if not lut_file.exists():
            return None
        try:
            lut = load_lut(lut_file, ndotv_floor=settings.ndotv_floor)
        except FormatError as e:
            logger.warning("dropping corrupt cached LUT %s: %s", lut_file, e)
            self.invalidate(settings)
            return None
        lut.sampler = settings.sampler
        return lut

    def set(self, settings: LutSettings, lut: EnvBrdfLut) -> Path:
        key = self.cache_key(settings)
        save_lut(lut, self._lut_file(key))
        entry = CacheEntry(key=key, size=settings.size, samples=settings.samples, seed=settings.seed,
                           sampler=settings.sampler, ndotv_floor=settings.ndotv_floor, created_at=time.time())
        with open(self._meta_file(key), 'w') as f:
            json.dump(entry.to_dict(), f, indent=2)
        return self._lut_file(key)

    def get_or_compute(self, settings: LutSettings, threads: Optional[int] = None) -> EnvBrdfLut:
        """Load the table from cache, precomputing and storing it on a miss"""
        lut = self.get(settings)
        if lut is not None:
            log_event(logger, "lut cache hit", key=self.cache_key(settings), level=logging.DEBUG)
            return lut
        if threads is None:
            threads = runtime_settings().threads
        lut = precompute_lut(settings.size, settings.size, settings.samples, settings.seed,
                             sampler=settings.sampler, ndotv_floor=settings.ndotv_floor, threads=threads)
        path = self.set(settings, lut)
        log_event(logger, "lut cached", path=path)
        # Round through the file so hits and misses return identical float32 tables
        return self.get(settings)

    def invalidate(self, settings: LutSettings) -> None:
        key = self.cache_key(settings)
        self._lut_file(key).unlink(missing_ok=True)
        self._meta_file(key).unlink(missing_ok=True)

    def entries(self) -> List[CacheEntry]:
        result = []
        for meta_file in sorted(self.cache_dir.glob("lut_*.json")):
            try:
                with open(meta_file, 'r') as f:
                    result.append(CacheEntry.from_dict(json.load(f)))
            except (OSError, json.JSONDecodeError, TypeError):
                continue
        return result

    def clear_all(self) -> int:
        count = 0
        for cache_file in self.cache_dir.glob("lut_*"):
            cache_file.unlink()
            count += 1
        return count


# Global cache manager instance
cache_manager = CacheManager()


def get_lut(settings: Optional[LutSettings] = None) -> EnvBrdfLut:
    """Runtime LUT for `settings` (defaults from the active config)"""
    if settings is None:
        settings = config_manager.load_config().lut
    return cache_manager.get_or_compute(settings)


if __name__ == "__main__":
    table = get_lut(LutSettings(size=16, samples=256))
    print(f"LUT {table.size} from {cache_manager.cache_dir}")
    for entry in cache_manager.entries():
        print(f"  {entry.key}: {entry.size}x{entry.size} @ {entry.samples} spp, {entry.age_minutes:.1f} min old")
