"""Deterministic synthetic corpus generator.

Stands in for the unavailable public dataset: each family profile plants
an identifying motif subsequence and inserts file-access APIs (original
spellings chosen uniformly among the alias table) with configured
presence rates, over a shared background alphabet of unrelated
Windows-style API names. Per-trace RNG substreams are derived from
(seed, trace index), so generation is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .corpus import Trace
from .fap import ALIAS_TO_CANONICAL, CANONICAL_FAP_APIS, DEFAULT_FAP_SET

# Common non-file-access background pool (50 names).
BACKGROUND_POOL = (
    "NtQuerySystemInformation", "NtQueryInformationProcess", "GetProcAddress",
    "LoadLibraryA", "LoadLibraryExW", "GetModuleHandleA", "GetModuleFileNameW",
    "VirtualAlloc", "VirtualProtect", "VirtualFree", "HeapAlloc", "HeapFree",
    "CreateThread", "ResumeThread", "TerminateProcess", "OpenProcess",
    "GetCurrentProcessId", "GetTickCount", "QueryPerformanceCounter", "Sleep",
    "WaitForSingleObject", "CreateMutexA", "ReleaseMutex", "CreateEventW",
    "SetEvent", "RegOpenKeyExA", "RegQueryValueExA", "RegSetValueExA",
    "RegCloseKey", "RegEnumKeyExW", "GetSystemDirectoryA", "GetWindowsDirectoryW",
    "GetEnvironmentVariableA", "ExpandEnvironmentStringsW", "GetComputerNameW",
    "GetUserNameA", "GetVersionExA", "IsDebuggerPresent", "OutputDebugStringA",
    "FindWindowA", "SendMessageA", "PostMessageW", "GetForegroundWindow",
    "SetWindowsHookExA", "UnhookWindowsHookEx", "GetKeyState", "MapVirtualKeyW",
    "GlobalAlloc", "GlobalFree", "LocalAlloc",
)

# Family-specific extras mixed into a profile's background pool.
ADWARE_EXTRAS = ("InternetOpenA", "InternetOpenUrlA", "HttpSendRequestA")
WORM_EXTRAS = ("WSAStartup", "socket_connect", "NetShareEnum")

_ORIGINALS = {c: tuple(a for a, t in ALIAS_TO_CANONICAL.items() if t == c)
              for c in CANONICAL_FAP_APIS}


@dataclass(frozen=True)
class FamilyProfile:
    name: str
    motif: tuple[str, ...]
    motif_rate: float
    background: tuple[str, ...]
    fap_api_rates: Mapping[str, float]
    length_mean: float
    length_spread: float
    motif_repeats: tuple[int, int] = (1, 1)  # inclusive range of insertions

    def __post_init__(self):
        if not (0.0 <= self.motif_rate <= 1.0):
            raise ValueError(f"{self.name}: motif_rate out of [0,1]")
        for api, rate in self.fap_api_rates.items():
            if api not in CANONICAL_FAP_APIS:
                raise ValueError(f"{self.name}: unknown FAP API {api!r}")
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"{self.name}: rate for {api} out of [0,1]")
        if self.length_mean < len(self.motif):
            raise ValueError(f"{self.name}: mean length below motif length")


@dataclass(frozen=True)
class SynthSpec:
    profiles: tuple[FamilyProfile, ...]
    counts: Mapping[str, int]
    seed: int

    def __post_init__(self):
        for p in self.profiles:
            if self.counts.get(p.name, 0) < 1:
                raise ValueError(f"count for family {p.name!r} must be >= 1")

    @property
    def total(self) -> int:
        return sum(self.counts[p.name] for p in self.profiles)


def _generate_trace(profile: FamilyProfile, rng, trace_id: str) -> Trace:
    min_len = max(len(profile.motif) * max(profile.motif_repeats[1], 1) + 16, 8)
    length = max(min_len, int(round(rng.normal(profile.length_mean, profile.length_spread))))
    calls = list(rng.choice(profile.background, size=length))

    protected = set()
    if profile.motif and rng.random() < profile.motif_rate:
        lo, hi = profile.motif_repeats
        repeats = int(rng.integers(lo, hi + 1))
        m = len(profile.motif)
        for _ in range(repeats):
            for attempt in range(32):
                pos = int(rng.integers(0, length - m + 1))
                span = range(pos, pos + m)
                if not protected.intersection(span):
                    calls[pos:pos + m] = profile.motif
                    protected.update(span)
                    break

    free = [i for i in range(length) if i not in protected]
    for canonical in CANONICAL_FAP_APIS:
        rate = profile.fap_api_rates.get(canonical, 0.0)
        if rate <= 0.0 or rng.random() >= rate:
            continue
        copies = int(rng.integers(5, 13))
        spellings = _ORIGINALS[canonical]
        if not free:  # degenerate tiny traces: append to guarantee presence
            calls.append(str(rng.choice(spellings)))
            continue
        copies = min(copies, len(free))
        picks = rng.choice(len(free), size=copies, replace=False)
        for k in sorted(picks, reverse=True):
            calls[free[k]] = str(rng.choice(spellings))
            free.pop(k)
    return Trace(trace_id, profile.name, tuple(calls))


def generate_corpus(spec: SynthSpec) -> list[Trace]:
    """Deterministic corpus: one trace per (profile, index) substream."""
    traces = []
    k = 0
    for profile in spec.profiles:
        for i in range(spec.counts[profile.name]):
            rng = np.random.default_rng([spec.seed, k])
            traces.append(_generate_trace(profile, rng, f"{profile.name}-{i:04d}"))
            k += 1
    return traces


def default_benchmark_spec(seed: int = 7) -> SynthSpec:
    """Four families x 500 traces, mean length 235.

    The worm analogue always plants the create/write/copy triple; the
    adware analogue plants the temp-file triplet in 70% of its samples
    (and always creates, reads and writes files), so its exact FAP splits
    0.7/0.3 between the six-API pattern and create/read/write. The trojan
    and packed analogues share identical file-access rates spread over
    the create/read/write patterns, and overlap on purpose: both carry
    their identifying motif in only 90% of samples, so a motif-less
    sample of one is indistinguishable from a motif-less sample of the
    other.
    """
    shared_rates = {"CreateFile": 0.97, "ReadFile": 0.55, "WriteFile": 0.65,
                    "DeleteFile": 0.05, "GetTempFileName": 0.01,
                    "SetFileAttributes": 0.01, "CopyFile": 0.015}
    profiles = (
        FamilyProfile(
            name="trojan-fakeav",
            motif=("FindWindowA", "SendMessageA", "GetForegroundWindow"),
            motif_rate=0.9,
            background=BACKGROUND_POOL,
            fap_api_rates=dict(shared_rates),
            length_mean=220.0,
            length_spread=25.0,
            motif_repeats=(4, 8),
        ),
        FamilyProfile(
            name="adware",
            motif=("GetTempFileNameA", "SetFileAttributesA", "DeleteFileA"),
            motif_rate=0.7,
            background=BACKGROUND_POOL + ADWARE_EXTRAS,
            fap_api_rates={"CreateFile": 1.0, "ReadFile": 1.0, "WriteFile": 1.0},
            length_mean=196.0,
            length_spread=25.0,
            motif_repeats=(3, 6),
        ),
        FamilyProfile(
            name="packed",
            motif=("VirtualAlloc", "VirtualProtect", "ResumeThread"),
            motif_rate=0.9,
            background=BACKGROUND_POOL,
            fap_api_rates=dict(shared_rates),
            length_mean=309.0,
            length_spread=25.0,
            motif_repeats=(4, 8),
        ),
        FamilyProfile(
            name="worm",
            motif=("CreateFileA", "WriteFile", "CopyFileA"),
            motif_rate=1.0,
            background=BACKGROUND_POOL + WORM_EXTRAS,
            fap_api_rates={"ReadFile": 0.12, "DeleteFile": 0.04,
                           "GetTempFileName": 0.02, "SetFileAttributes": 0.02},
            length_mean=215.0,
            length_spread=25.0,
            motif_repeats=(3, 6),
        ),
    )
    counts = {p.name: 500 for p in profiles}
    return SynthSpec(profiles, counts, seed)


def fine_grained_spec(seed: int = 11) -> SynthSpec:
    """Eight-family variant with skewed counts for the fine-grained protocol."""
    base = {"CreateFile": 0.95, "ReadFile": 0.5, "WriteFile": 0.6}

    def profile(name, motif, rate, extras=(), rates=None, mean=210.0):
        return FamilyProfile(
            name=name, motif=motif, motif_rate=rate,
            background=BACKGROUND_POOL + tuple(extras),
            fap_api_rates=rates if rates is not None else dict(base),
            length_mean=mean, length_spread=25.0, motif_repeats=(2, 3),
        )

    profiles = (
        profile("adware-search", ("GetTempFileNameA", "SetFileAttributesA", "DeleteFileA"), 0.7,
                extras=ADWARE_EXTRAS,
                rates={"CreateFile": 1.0, "ReadFile": 1.0, "WriteFile": 1.0}, mean=155.0),
        profile("adware-download", ("InternetOpenA", "HttpSendRequestA", "GlobalAlloc"), 0.95,
                extras=ADWARE_EXTRAS, mean=250.0),
        profile("adware-screensaver", ("SetWindowsHookExA", "GetKeyState", "PostMessageW"), 0.95,
                extras=ADWARE_EXTRAS, mean=240.0),
        profile("worm-mail", ("CreateFileA", "WriteFile", "CopyFileA"), 1.0,
                extras=WORM_EXTRAS,
                rates={"ReadFile": 0.15, "DeleteFile": 0.05}, mean=260.0),
        profile("worm-net", ("WSAStartup", "socket_connect", "CopyFileA"), 1.0,
                extras=WORM_EXTRAS,
                rates={"CreateFile": 0.95, "WriteFile": 0.9, "ReadFile": 0.1}, mean=230.0),
        profile("trojan-fraud", ("FindWindowA", "SendMessageA", "GetForegroundWindow"), 0.9,
                mean=217.0),
        profile("packed-crypt", ("VirtualAlloc", "VirtualProtect", "ResumeThread"), 0.9,
                mean=193.0),
        profile("downloader", ("InternetOpenUrlA", "CreateThread", "Sleep"), 0.95,
                extras=("InternetOpenUrlA",), mean=250.0),
    )
    counts = {"adware-search": 495, "adware-download": 120, "adware-screensaver": 60,
              "worm-mail": 45, "worm-net": 30, "trojan-fraud": 360,
              "packed-crypt": 240, "downloader": 135}
    return SynthSpec(profiles, counts, seed)


# ---------------------------------------------------------------------------
# spec files: flat `key = value` dialect with repeated [family] sections


def save_spec(spec: SynthSpec, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"seed = {spec.seed}\n")
        for p in spec.profiles:
            fh.write("\n[family]\n")
            fh.write(f"name = {p.name}\n")
            fh.write(f"count = {spec.counts[p.name]}\n")
            fh.write(f"motif = {','.join(p.motif)}\n")
            fh.write(f"motif_rate = {p.motif_rate}\n")
            fh.write(f"motif_repeats = {p.motif_repeats[0]},{p.motif_repeats[1]}\n")
            fh.write(f"background = {','.join(p.background)}\n")
            fh.write(f"length_mean = {p.length_mean}\n")
            fh.write(f"length_spread = {p.length_spread}\n")
            for api in CANONICAL_FAP_APIS:
                if api in p.fap_api_rates:
                    fh.write(f"rate.{api} = {p.fap_api_rates[api]}\n")


def load_spec(path) -> SynthSpec:
    seed = 0
    sections: list[dict] = []
    current: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[family]":
                current = {}
                sections.append(current)
                continue
            if "=" not in line:
                raise ValueError(f"spec line {lineno}: expected key = value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if current is None:
                if key != "seed":
                    raise ValueError(f"spec line {lineno}: unexpected top-level key {key!r}")
                seed = int(raw)
            else:
                current[key] = raw
    profiles = []
    counts = {}
    for sec in sections:
        rates = {k[len("rate."):]: float(v) for k, v in sec.items() if k.startswith("rate.")}
        repeats = tuple(int(x) for x in sec.get("motif_repeats", "1,1").split(","))
        background = tuple(sec["background"].split(",")) if sec.get("background") else BACKGROUND_POOL
        p = FamilyProfile(
            name=sec["name"],
            motif=tuple(sec["motif"].split(",")) if sec.get("motif") else (),
            motif_rate=float(sec.get("motif_rate", "1.0")),
            background=background,
            fap_api_rates=rates,
            length_mean=float(sec["length_mean"]),
            length_spread=float(sec.get("length_spread", "0")),
            motif_repeats=(repeats[0], repeats[1]),
        )
        profiles.append(p)
        counts[p.name] = int(sec["count"])
    return SynthSpec(tuple(profiles), counts, seed)
