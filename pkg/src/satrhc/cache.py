"""Moment cache files.

The expensive expectations are computed once and stored, keyed by a content
hash of (basis, noise, horizon, samples, seed).  Files are plain .npz
containers with a JSON header; array bytes are hashed on write and verified
on load, so corruption and descriptor mismatches are both refused loudly.
Round trips are bit-exact (float64 bits are preserved by the npz format).
"""

import hashlib
import io
import json
import os

import numpy as np

from .moments import Moments

FORMAT_VERSION = 1

_ARRAY_FIELDS = ("stage_sigma_e", "stage_sigma_we", "stage_mu_e",
                 "stage_mu_w", "stage_sigma_w")
_SE_FIELDS = ("se_sigma_e", "se_sigma_we", "se_mu_e", "se_mu_w", "se_sigma_w")


class CacheError(RuntimeError):
    pass


def descriptor_key(descriptor) -> str:
    """Stable hash of the (basis, noise, horizon, samples, seed) descriptor."""
    blob = json.dumps(descriptor, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _content_hash(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def save_moments(path, moments: Moments) -> str:
    """Write a cache file; returns the descriptor key it is stored under."""
    if moments.descriptor is None:
        raise CacheError("moments carry no descriptor; cannot key the cache")
    arrays = {name: np.asarray(getattr(moments, name), dtype=float)
              for name in _ARRAY_FIELDS}
    for name in _SE_FIELDS:
        val = getattr(moments, name)
        if val is not None:
            arrays[name] = np.asarray(val, dtype=float)
    header = {
        "format_version": FORMAT_VERSION,
        "descriptor": moments.descriptor,
        "descriptor_key": descriptor_key(moments.descriptor),
        "content_hash": _content_hash(arrays),
        "n": moments.n,
        "d": moments.d,
        "horizon": moments.horizon,
        "sample_count": moments.sample_count,
    }
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
             **arrays)
    data = buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return header["descriptor_key"]


def load_moments(path, expected_descriptor=None) -> Moments:
    """Load a cache file, verifying integrity and (optionally) the key."""
    try:
        with np.load(path) as npz:
            header = json.loads(bytes(npz["header"]).decode())
            arrays = {k: npz[k] for k in npz.files if k != "header"}
    except Exception as exc:
        raise CacheError(f"cannot read moment cache {path!r}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CacheError(f"unsupported cache format {header.get('format_version')}")
    if _content_hash(arrays) != header["content_hash"]:
        raise CacheError(f"moment cache {path!r} is corrupted (content hash mismatch)")
    if expected_descriptor is not None:
        want = descriptor_key(expected_descriptor)
        if want != header["descriptor_key"]:
            raise CacheError(
                "moment cache key mismatch: the file was built for a different "
                f"(basis, noise, horizon, samples, seed) tuple ({header['descriptor_key'][:12]} "
                f"on disk vs {want[:12]} requested)")
    kwargs = {name: arrays[name] for name in _ARRAY_FIELDS}
    for name in _SE_FIELDS:
        kwargs[name] = arrays.get(name)
    return Moments(n=int(header["n"]), d=int(header["d"]),
                   horizon=int(header["horizon"]),
                   sample_count=int(header["sample_count"]),
                   descriptor=header["descriptor"], **kwargs)


def inspect_cache(path) -> str:
    """Human-readable dump: dimensions, key, leading eigenvalues, errors."""
    m = load_moments(path)
    eig = np.linalg.eigvalsh(m.stage_sigma_e)[::-1]
    lines = [
        f"moment cache: {path}",
        f"  descriptor key : {descriptor_key(m.descriptor)}",
        f"  stage dims     : n={m.n} d={m.d} horizon={m.horizon}",
        f"  sample count   : {m.sample_count} "
        + ("(closed form)" if m.sample_count == 0 else "(Monte Carlo)"),
        f"  sigma_e lead eigs: {np.array2string(eig[:6], precision=6)}",
    ]
    if m.se_sigma_e is not None:
        lines.append(f"  max std errors : sigma_e {m.se_sigma_e.max():.3e}, "
                     f"sigma_we {m.se_sigma_we.max():.3e}, mu_e {m.se_mu_e.max():.3e}")
    return "\n".join(lines)
