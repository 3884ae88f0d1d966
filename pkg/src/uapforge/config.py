"""Run configuration: TOML file + environment + CLI overrides, strictly validated."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

from .errors import ConfigError, UapForgeError
from .objectives import LossConfig
from .optimizer import AttackConfig, AugmentConfig
from .text_attack import TextConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "UAPFORGE_SEED"

TOP_LEVEL = {"manifest": str, "adapter": str, "seed": int, "adapter_args": dict}
EVAL_KEYS = {"k": list}


def _section_schema(cls, exclude=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float) or f.name == "step_size":
            out[f.name] = float
        elif isinstance(default, tuple):
            out[f.name] = list
        else:
            out[f.name] = str
    return out


SECTIONS = {
    "attack": _section_schema(AttackConfig, exclude=("augment", "loss", "seed")),
    "augment": _section_schema(AugmentConfig),
    "loss": _section_schema(LossConfig),
    "text": _section_schema(TextConfig, exclude=("seed",)),
    "eval": EVAL_KEYS,
}


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    adapter: str
    seed: int = 0
    adapter_args: dict = field(default_factory=dict)
    attack: AttackConfig = field(default_factory=AttackConfig)
    text: TextConfig = field(default_factory=TextConfig)
    eval_k: tuple = (1, 5, 10)

    def to_dict(self) -> dict:
        a = dataclasses.asdict(self.attack)
        augment, loss = a.pop("augment"), a.pop("loss")
        a.pop("seed")
        t = dataclasses.asdict(self.text)
        t.pop("seed")
        return _jsonable({
            "manifest": self.manifest,
            "adapter": self.adapter,
            "seed": self.seed,
            "adapter_args": dict(self.adapter_args),
            "attack": a,
            "augment": augment,
            "loss": loss,
            "text": t,
            "eval": {"k": list(self.eval_k)},
        })

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1, cutoff=0.6)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _type_ok(value, kind) -> bool:
    if kind is bool:
        return isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, kind)


def _check_keys(raw: dict, problems: list) -> None:
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"[{key}] must be a table")
                continue
            schema = SECTIONS[key]
            for sub, v in value.items():
                if sub not in schema:
                    problems.append(f"unknown key {sub!r} in [{key}]{_suggest(sub, schema)}")
                elif not _type_ok(v, schema[sub]):
                    problems.append(f"[{key}] {sub} must be {schema[sub].__name__}, got {type(v).__name__}")
        elif key in TOP_LEVEL:
            if not _type_ok(value, TOP_LEVEL[key]):
                problems.append(f"{key} must be {TOP_LEVEL[key].__name__}, got {type(value).__name__}")
        else:
            nested = [f"{s}.{k}" for s, keys in SECTIONS.items() for k in keys if k == key]
            hint = f" (belongs in [{nested[0].split('.')[0]}])" if nested else _suggest(
                key, list(TOP_LEVEL) + list(SECTIONS) + [k for keys in SECTIONS.values() for k in keys])
            problems.append(f"unknown key {key!r}{hint}")


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_config(raw: dict) -> RunConfig:
    """Validate a raw mapping and build a :class:`RunConfig`; lists every problem at once."""
    problems: list = []
    _check_keys(raw, problems)
    for req in ("manifest", "adapter"):
        if not raw.get(req):
            problems.append(f"missing required key {req!r}")
    if problems:
        raise ConfigError(problems)

    seed = raw.get("seed", 0)
    parts = {}
    for name, ctor in (("augment", AugmentConfig), ("loss", LossConfig)):
        try:
            parts[name] = ctor(**_tuplify(raw.get(name, {})))
        except (UapForgeError, ValueError, TypeError) as exc:
            problems.append(f"[{name}] {exc}")
    attack = text = None
    if not problems:
        try:
            attack = AttackConfig(seed=seed, augment=parts["augment"], loss=parts["loss"],
                                  **raw.get("attack", {}))
            # pin the derived step so the snapshot rebuilds an identical config
            attack = dataclasses.replace(attack, step_size=attack.alpha_step)
        except (UapForgeError, ValueError, TypeError) as exc:
            problems.append(f"[attack] {exc}")
    try:
        text = TextConfig(seed=seed, **raw.get("text", {}))
    except (UapForgeError, ValueError, TypeError) as exc:
        problems.append(f"[text] {exc}")
    ks = raw.get("eval", {}).get("k", [1, 5, 10])
    if not ks or not all(_type_ok(k, int) and k >= 1 for k in ks):
        problems.append("[eval] k must be a non-empty list of integers >= 1")
    if problems:
        raise ConfigError(problems)
    return RunConfig(raw["manifest"], raw["adapter"], seed, dict(raw.get("adapter_args", {})),
                     attack, text, tuple(ks))


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def parse_override(item: str) -> tuple:
    """``section.key=value`` (TOML value syntax; bare words are strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, text = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    return tuple(dotted.strip().split(".")), value


def merge(raw: dict, path: tuple, value) -> None:
    node = raw
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value


def resolve(config_path=None, overrides=(), flags: dict | None = None, environ=os.environ) -> RunConfig:
    """Config file < ``UAPFORGE_SEED`` < ``--set`` overrides < dedicated CLI flags."""
    raw = read_toml(config_path) if config_path else {}
    if environ.get(SEED_ENV):
        try:
            raw["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
    for item in overrides:
        merge(raw, *parse_override(item))
    for key, value in (flags or {}).items():
        if value is not None:
            merge(raw, tuple(key.split(".")), value)
    return build_config(raw)


def default_toml() -> str:
    """A commented config file holding every default."""
    cfg = RunConfig("manifest.jsonl", "toy")
    d = cfg.to_dict()
    d["attack"]["step_size"] = None
    lines = ['manifest = "manifest.jsonl"', 'adapter = "toy"', f"seed = {cfg.seed}", ""]
    for section in ("attack", "augment", "loss", "text", "eval"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if v is None:
                lines.append(f"# {k} = epsilon_I / iterations * 1.25 when unset")
            else:
                lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
