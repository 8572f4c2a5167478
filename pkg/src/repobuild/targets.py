"""Executable-name prediction from Makefiles: find them, shrink them with an
ordered regex rule set, extract final-link targets, optionally ask an LLM."""

from __future__ import annotations

import json
import logging
import posixpath
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ProtocolError
from .gateway import ChatMessage, LlmConfig, complete
from .workspace import Workspace

logger = logging.getLogger(__name__)

_MAKEFILE_NAMES = {"Makefile", "makefile", "GNUmakefile"}
_NON_TARGET_EXTS = {".o", ".obj", ".lo", ".a", ".c", ".cc", ".cpp", ".cxx", ".h", ".hpp", ".s"}
_VAR_REF_RE = re.compile(r"^\$[({](\w+)[)}]$")
_ASSIGN_RE = re.compile(r"^[ \t]*(\w+)[ \t]*[:?+]?=[ \t]*(.*)$")
_OUTPUT_FLAG_RE = re.compile(r"-o[ \t]+(\S+)")

_NAMES_REMINDER = (
    "Your previous reply did not follow the required format. Reply with exactly:\n"
    "NAMES:\n<one executable name per line, or leave empty>"
)


@dataclass(frozen=True)
class MakefileDoc:
    rel_path: str
    raw_lines: int
    cleaned_text: str
    cleaned_lines: int

    def __post_init__(self):
        if self.cleaned_lines > self.raw_lines:
            raise ValueError("cleaning may not grow a makefile")


@dataclass(frozen=True)
class TargetPrediction:
    names: Tuple[str, ...]
    evidence: Dict[str, Tuple[str, int]]  # name -> (makefile path, rule line)

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ValueError("predicted names must be unique")
        missing = [n for n in self.names if n not in self.evidence]
        if missing:
            raise ValueError(f"names without evidence: {missing}")


def find_makefiles(ws: Workspace) -> List[str]:
    """Relative paths of all Makefiles and .mk fragments, shallowest first."""
    found = []
    for path in ws.root_path.rglob("*"):
        if ".git" in path.parts or not path.is_file():
            continue
        if path.name in _MAKEFILE_NAMES or path.suffix == ".mk":
            rel = str(path.relative_to(ws.root_path))
            found.append((rel.count("/"), rel))
    return [rel for _, rel in sorted(found)]


def load_cleaning_rules(path: Optional[Path] = None) -> List[Tuple[str, re.Pattern]]:
    if path is not None:
        raw = Path(path).read_text("utf-8")
    else:
        raw = (
            resources.files("repobuild.assets")
            .joinpath("makefile_cleaning_rules.json")
            .read_text("utf-8")
        )
    rules = []
    for entry in json.loads(raw):
        action = entry["action"]
        if action not in ("drop-rule", "drop-line", "keep-rule"):
            raise ValueError(f"unknown cleaning action {action!r}")
        rules.append((action, re.compile(entry["pattern"], re.MULTILINE)))
    return rules


def _split_units(text: str) -> List[Tuple[str, str, int]]:
    """(kind, text, 1-based start line) units: 'rule' blocks with their recipe
    lines, or single 'line' units."""
    units = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        start = i + 1
        if line.startswith("\t"):
            # stray recipe line without a rule; treat as a plain line
            units.append(("line", line, start))
            i += 1
            continue
        if _is_rule_header(line):
            block = [line]
            i += 1
            while i < len(lines) and lines[i].startswith("\t"):
                block.append(lines[i])
                i += 1
            units.append(("rule", "\n".join(block), start))
        else:
            units.append(("line", line, start))
            i += 1
    return units


def _is_rule_header(line: str) -> bool:
    if line.startswith(("\t", "#")) or not line.strip():
        return False
    colon = -1
    for idx, ch in enumerate(line):
        if ch == "=" and colon == -1:
            return False
        if ch == ":":
            # := and ::= introduce assignments, not rules
            if idx + 1 < len(line) and line[idx + 1] == "=":
                return False
            colon = idx
            break
    return colon != -1


def clean_makefile(text: str, rules: Optional[List[Tuple[str, re.Pattern]]] = None) -> str:
    """Shrink a makefile to the parts that matter for naming final binaries.

    Continuations are collapsed, then every unit (rule block or single line)
    is matched against the ordered rule set; the first matching entry decides
    keep or drop, and unmatched units are kept.
    """
    rules = rules if rules is not None else load_cleaning_rules()
    collapsed = re.sub(r"\\\n[ \t]*", " ", text)
    kept = []
    for kind, unit, _ in _split_units(collapsed):
        decision = None
        for action, pattern in rules:
            if action == "drop-rule" and kind != "rule":
                continue
            if action == "drop-line" and kind != "line":
                continue
            if pattern.search(unit):
                decision = "keep" if action == "keep-rule" else "drop"
                break
        if decision != "drop":
            kept.append(unit)
    return "\n".join(kept) + ("\n" if kept else "")


def load_makefile_docs(
    ws: Workspace, rules: Optional[List[Tuple[str, re.Pattern]]] = None
) -> List[MakefileDoc]:
    docs = []
    for rel in find_makefiles(ws):
        raw = (ws.root_path / rel).read_text("utf-8", errors="replace")
        cleaned = clean_makefile(raw, rules)
        docs.append(
            MakefileDoc(
                rel_path=rel,
                raw_lines=len(raw.split("\n")),
                cleaned_text=cleaned,
                cleaned_lines=len(cleaned.split("\n")) if cleaned else 0,
            )
        )
    return docs


def _expand(token: str, assignments: Dict[str, str]) -> Optional[str]:
    m = _VAR_REF_RE.match(token)
    if not m:
        return token
    value = assignments.get(m.group(1), "").split()
    return value[0] if value else None


def extract_targets_rule_based(docs: Sequence[MakefileDoc]) -> TargetPrediction:
    """Targets of final-link rules: not phony, named by the recipe's -o flag
    or an output variable, without object or source extensions."""
    names: List[str] = []
    evidence: Dict[str, Tuple[str, int]] = {}
    for doc in docs:
        units = _split_units(doc.cleaned_text)
        assignments: Dict[str, str] = {}
        phony: set = set()
        for kind, unit, _ in units:
            if kind == "line":
                m = _ASSIGN_RE.match(unit)
                if m:
                    assignments[m.group(1)] = m.group(2).strip()
            elif unit.split(":")[0].strip() == ".PHONY":
                phony.update(unit.split(":", 1)[1].split())
        for kind, unit, line_no in units:
            if kind != "rule":
                continue
            header, _, recipe = unit.partition("\n")
            target_part = header.split(":", 1)[0]
            if not recipe:
                continue
            for tok in target_part.split():
                resolved = _expand(tok, assignments)
                if not resolved or resolved in phony or tok in phony:
                    continue
                if resolved.startswith(".") or "%" in resolved:
                    continue
                base = posixpath.basename(resolved)
                if posixpath.splitext(base)[1] in _NON_TARGET_EXTS:
                    continue
                if not _recipe_names_target(recipe, tok, resolved, assignments):
                    continue
                if base not in evidence:
                    names.append(base)
                    evidence[base] = (doc.rel_path, line_no)
    return TargetPrediction(names=tuple(names), evidence=evidence)


def _recipe_names_target(
    recipe: str, raw_target: str, resolved: str, assignments: Dict[str, str]
) -> bool:
    for m in _OUTPUT_FLAG_RE.finditer(recipe):
        out = m.group(1)
        if out == "$@":
            return True
        expanded = _expand(out, assignments)
        if expanded and posixpath.basename(expanded) == posixpath.basename(resolved):
            return True
        if out == raw_target:
            return True
    # archive tools name the output as their first non-flag argument
    ar = re.search(r"^\t[^\n]*\bar\b[ \t]+\S+[ \t]+(\S+)", recipe, re.MULTILINE)
    if ar:
        out = _expand(ar.group(1), assignments)
        if out == "$@" or (out and posixpath.basename(out) == posixpath.basename(resolved)):
            return True
    return False


def extract_targets_llm(
    docs: Sequence[MakefileDoc], cfg: LlmConfig
) -> TargetPrediction:
    """Ask the model for executable names over the cleaned docs and merge its
    list (first) with the rule-based extraction (after), deduplicated."""
    rule_based = extract_targets_rule_based(docs)
    template = (
        resources.files("repobuild.assets.prompts")
        .joinpath("target_predict.txt")
        .read_text("utf-8")
    )
    rendered = "\n\n".join(
        f"### {doc.rel_path}\n{doc.cleaned_text}" for doc in docs
    ) or "(no makefiles)"
    budget = max(4096, cfg.max_reply_chars // 2)
    llm_names: List[str] = []
    for chunk in _chunk(rendered, budget):
        raw = complete(cfg, [ChatMessage("user", template.format(makefiles=chunk))])
        parsed = _parse_names(raw)
        if parsed is None:
            raw = complete(
                cfg,
                [
                    ChatMessage("user", template.format(makefiles=chunk)),
                    ChatMessage("assistant", raw),
                    ChatMessage("user", _NAMES_REMINDER),
                ],
            )
            parsed = _parse_names(raw)
            if parsed is None:
                raise ProtocolError("target prediction reply is missing the NAMES label")
        llm_names.extend(parsed)

    names: List[str] = []
    evidence = dict(rule_based.evidence)
    fallback_doc = docs[0].rel_path if docs else ""
    for name in llm_names:
        if name not in names:
            names.append(name)
            evidence.setdefault(name, (fallback_doc, 0))
    for name in rule_based.names:
        if name not in names:
            names.append(name)
    return TargetPrediction(names=tuple(names), evidence=evidence)


def _parse_names(raw: str) -> Optional[List[str]]:
    m = re.search(r"^\s*NAMES:\s*\n?(.*)\Z", raw, re.DOTALL | re.MULTILINE)
    if not m:
        return None
    names = []
    for line in m.group(1).splitlines():
        line = line.strip().lstrip("-*").strip()
        if line and line.lower() not in ("none", "(empty)"):
            names.append(line)
    return names


def _chunk(text: str, budget: int, overlap_lines: int = 10) -> List[str]:
    if len(text) <= budget:
        return [text]
    lines = text.split("\n")
    chunks = []
    start = 0
    while start < len(lines):
        size = 0
        end = start
        while end < len(lines) and size + len(lines[end]) + 1 <= budget:
            size += len(lines[end]) + 1
            end += 1
        end = max(end, start + 1)
        chunks.append("\n".join(lines[start:end]))
        if end >= len(lines):
            break
        start = max(end - overlap_lines, start + 1)
    return chunks


def predict_targets(
    ws: Workspace, cfg: Optional[LlmConfig] = None
) -> TargetPrediction:
    """End-to-end prediction for one workspace; pass a config to add the LLM
    refinement on top of the rule-based pass."""
    docs = load_makefile_docs(ws)
    if cfg is None:
        return extract_targets_rule_based(docs)
    return extract_targets_llm(docs, cfg)
