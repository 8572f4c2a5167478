"""Script-generation agent: prompt assembly, reply parsing, and the
generate -> execute -> repair loop, plus the single-shot baseline."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, List, Optional, Sequence, Tuple

from .errors import RepobuildError, UsageError
from .gateway import ChatMessage, LlmConfig, complete
from .sandbox import (
    CommandScript,
    ExecutionResult,
    SandboxSpec,
    create_sandbox,
    destroy_sandbox,
    exec_script,
)
from .workspace import Workspace

logger = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 12

VARIANTS = ("agent-with-retrieval", "agent-no-retrieval", "single-turn", "rule-based")
OUTCOMES = (
    "succeeded",
    "agent-terminated",
    "turn-budget-exhausted",
    "protocol-error",
    "infra-error",
)

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)
_TERMINATE_RE = re.compile(r"\bterminate\b", re.IGNORECASE)
_SHELL_TAGS = {"bash", "sh", "shell"}
_HEREDOC_RE = re.compile(r"<<-?\s*['\"]?(\w+)['\"]?")

ELIDED_MARKER = "[execution output elided to fit the context budget]"

SuccessProbe = Callable[[ExecutionResult, Workspace], bool]


def _prompt(name: str) -> str:
    return resources.files("repobuild.assets.prompts").joinpath(name).read_text("utf-8")


@dataclass(frozen=True)
class PromptContext:
    """Everything the generator prompt needs to know about one repository."""

    repo_full_name: str
    repo_root_in_sandbox: str
    readme: str
    root_listing: str
    preinstalled: str
    instructions: Optional[str] = None


@dataclass
class Turn:
    k: int
    kind: str  # command-turn | termination-turn | protocol-violation
    agent_reply_raw: str
    script: Optional[CommandScript] = None
    result: Optional[ExecutionResult] = None
    violation_note: Optional[str] = None

    def __post_init__(self):
        if self.kind == "command-turn" and self.script is None:
            raise ValueError("command turn requires a script")
        if self.kind == "termination-turn" and (self.script or self.result):
            raise ValueError("termination turn carries neither script nor result")


@dataclass
class BuildSession:
    repo_id: str
    variant: str
    max_turns: int
    turns: List[Turn] = field(default_factory=list)
    outcome: str = "infra-error"
    error_detail: Optional[str] = None

    @property
    def fix_attempts(self) -> int:
        # rule-based attempts are alternative routines, not feedback-driven fixes
        if self.variant == "rule-based":
            return 0
        return sum(1 for t in self.turns if t.kind == "command-turn" and t.k >= 1)


@dataclass(frozen=True)
class ParsedReply:
    kind: str  # command | termination | violation
    script: Optional[CommandScript] = None
    reason: str = ""
    violation: Optional[str] = None


def _block_to_commands(block: str) -> List[str]:
    """Split a code block into commands, keeping multi-line constructs whole.

    Full-line comments are dropped. A trailing backslash, a trailing
    connective (&& || |), or an open heredoc keeps pulling lines into the
    same command so the shell receives it as one unit.
    """
    commands: List[str] = []
    pending: List[str] = []
    heredoc_end: Optional[str] = None
    for line in block.split("\n"):
        if heredoc_end is not None:
            pending.append(line)
            if line.strip() == heredoc_end:
                heredoc_end = None
                if not _continues(pending[-1]):
                    commands.append("\n".join(pending))
                    pending = []
            continue
        if not pending and (not line.strip() or line.lstrip().startswith("#")):
            continue
        pending.append(line)
        m = _HEREDOC_RE.search(line)
        if m:
            heredoc_end = m.group(1)
            continue
        if _continues(line):
            continue
        commands.append("\n".join(pending))
        pending = []
    if pending:
        commands.append("\n".join(pending))
    return [c for c in commands if c.strip()]


def _continues(line: str) -> bool:
    stripped = line.rstrip()
    return stripped.endswith(("\\", "&&", "||", "|"))


def parse_agent_reply(raw: str, origin_turn: int = 0) -> ParsedReply:
    """Classify one agent reply as a command script, a termination, or a violation.

    The last shell-tagged fenced block wins; an untagged fenced block counts
    only when it is the sole block. A reply that pairs a code block with the
    word "terminate" is treated as a command turn with the violation noted.
    """
    blocks = _FENCE_RE.findall(raw)
    shell_blocks = [body for tag, body in blocks if tag.strip().lower() in _SHELL_TAGS]
    chosen: Optional[str] = None
    if shell_blocks:
        chosen = shell_blocks[-1]
    elif len(blocks) == 1 and not blocks[0][0].strip():
        chosen = blocks[0][1]

    has_terminate = bool(_TERMINATE_RE.search(raw))

    if chosen is not None:
        commands = _block_to_commands(chosen)
        commands = [c for c in commands if c.strip().lower() != "terminate"]
        if commands:
            note = None
            if has_terminate:
                note = "reply mixed a code block with the word 'terminate'"
            return ParsedReply(
                kind="command",
                script=CommandScript(commands=tuple(commands), origin_turn=origin_turn),
                violation=note,
            )
    if has_terminate:
        reason = _TERMINATE_RE.sub("", raw).strip()
        return ParsedReply(kind="termination", reason=reason)
    return ParsedReply(kind="violation", violation="no code block and no termination word")


def _render_history(turns: Sequence[Turn]) -> str:
    parts = []
    for t in turns:
        if t.script is None:
            continue
        parts.append(f"# commands of turn {t.k}")
        parts.extend(t.script.commands)
    return "\n".join(parts) if parts else "(no commands executed yet)"


def assemble_generator_prompt(
    ctx: PromptContext,
    history: Sequence[Turn],
    budget: int = 200_000,
) -> List[ChatMessage]:
    """Render the conversation sent to the generator at the current turn.

    With no history this is just the system prompt plus the initial request.
    Each later feedback message carries the full command history and the
    newest execution output; when the rendered total exceeds the budget,
    outputs inside the oldest feedback messages are elided first. The system
    prompt, the initial request, and the newest output are never cut.
    """
    system = ChatMessage("system", _prompt("generator_system.txt"))
    if ctx.instructions:
        section = f"\nBuild instructions gathered from the project documentation:\n{ctx.instructions}\n"
    else:
        section = ""
    initial = ChatMessage(
        "user",
        _prompt("generator_user_initial.txt").format(
            repo_full_name=ctx.repo_full_name,
            repos_dir_in_docker=ctx.repo_root_in_sandbox,
            per_installed_libraries_in_docker=ctx.preinstalled,
            readme_content=ctx.readme,
            files_in_root_dir=ctx.root_listing,
            instructions_section=section,
        ),
    )
    messages = [system, initial]
    command_turns = [t for t in history if t.kind == "command-turn"]
    feedback_tpl = _prompt("generator_user_feedback.txt")

    outputs = []
    for i, turn in enumerate(command_turns):
        messages.append(ChatMessage("assistant", turn.agent_reply_raw))
        output = turn.result.combined_output if turn.result else "(no output captured)"
        outputs.append(output)
        messages.append(
            ChatMessage(
                "user",
                feedback_tpl.format(
                    repo_full_name=ctx.repo_full_name,
                    repos_dir_in_docker=ctx.repo_root_in_sandbox,
                    command_history=_render_history(command_turns[: i + 1]),
                    execution_output=output,
                ),
            )
        )

    def total() -> int:
        return sum(len(m.content) for m in messages)

    # feedback messages sit at odd offsets after the first two; the newest
    # (last) one is never elided
    feedback_idx = [i for i in range(2, len(messages)) if messages[i].role == "user"]
    for pos, idx in enumerate(feedback_idx[:-1] if feedback_idx else []):
        if total() <= budget:
            break
        if outputs[pos]:
            messages[idx] = ChatMessage(
                "user", messages[idx].content.replace(outputs[pos], ELIDED_MARKER)
            )
    return messages


def run_build_loop(
    ws: Workspace,
    ctx: PromptContext,
    cfg: LlmConfig,
    spec: SandboxSpec,
    success_probe: SuccessProbe,
    max_turns: int = DEFAULT_MAX_TURNS,
    variant: str = "agent-no-retrieval",
    trajectory: Optional[Callable[[BuildSession], None]] = None,
) -> BuildSession:
    """Drive generate -> execute -> repair until success, termination, budget
    exhaustion, or two consecutive protocol violations.

    Turn indices run 0..max_turns inclusive, so a session contains at most
    max_turns + 1 command turns. The same sandbox is reused across turns so
    dependencies installed by one script remain available to the next.
    """
    if max_turns < 1:
        raise UsageError("max_turns must be >= 1")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    session = BuildSession(repo_id=ws.repo_id, variant=variant, max_turns=max_turns)
    handle = None
    try:
        handle = create_sandbox(spec, ws)
        for k in range(max_turns + 1):
            messages = assemble_generator_prompt(ctx, session.turns, budget=cfg.max_reply_chars)
            parsed, raw = _ask_with_retry(cfg, messages, origin_turn=k)
            if parsed.kind == "violation":
                session.turns.append(
                    Turn(k=k, kind="protocol-violation", agent_reply_raw=raw,
                         violation_note=parsed.violation)
                )
                session.outcome = "protocol-error"
                session.error_detail = parsed.violation
                break
            if parsed.kind == "termination":
                session.turns.append(Turn(k=k, kind="termination-turn", agent_reply_raw=raw))
                session.outcome = "agent-terminated"
                session.error_detail = parsed.reason[:500] or None
                break
            result = exec_script(handle, parsed.script)
            session.turns.append(
                Turn(
                    k=k,
                    kind="command-turn",
                    agent_reply_raw=raw,
                    script=parsed.script,
                    result=result,
                    violation_note=parsed.violation,
                )
            )
            if success_probe(result, ws):
                session.outcome = "succeeded"
                break
        else:
            session.outcome = "turn-budget-exhausted"
    except RepobuildError as exc:
        logger.warning("session for %s hit an infrastructure failure: %s", ws.repo_id, exc)
        session.outcome = "infra-error"
        session.error_detail = str(exc)
    finally:
        if handle is not None:
            destroy_sandbox(handle)
    if trajectory is not None:
        trajectory(session)
    return session


def _ask_with_retry(
    cfg: LlmConfig, messages: List[ChatMessage], origin_turn: int
) -> Tuple[ParsedReply, str]:
    """One completion, with a single format-reminder re-ask on a violation.

    Two violations in a row surface as a violation result; the caller decides
    the session outcome.
    """
    raw = complete(cfg, messages)
    parsed = parse_agent_reply(raw, origin_turn=origin_turn)
    if parsed.kind != "violation":
        return parsed, raw
    reminder = messages + [
        ChatMessage("assistant", raw),
        ChatMessage("user", _prompt("format_reminder.txt")),
    ]
    raw2 = complete(cfg, reminder)
    parsed2 = parse_agent_reply(raw2, origin_turn=origin_turn)
    if parsed2.kind == "violation":
        return (
            ParsedReply(kind="violation", violation="two consecutive protocol violations"),
            raw2,
        )
    if parsed2.kind == "command":
        note = "recovered after a format reminder"
        parsed2 = ParsedReply(kind="command", script=parsed2.script, violation=note)
    return parsed2, raw2


def run_single_turn(
    ws: Workspace,
    ctx: PromptContext,
    cfg: LlmConfig,
    spec: SandboxSpec,
    success_probe: SuccessProbe,
    trajectory: Optional[Callable[[BuildSession], None]] = None,
) -> BuildSession:
    """Single-shot baseline: one prompt, one script, one execution, no repair."""
    session = BuildSession(repo_id=ws.repo_id, variant="single-turn", max_turns=1)
    prompt = _prompt("single_turn.txt").format(
        repo_full_name=ctx.repo_full_name,
        repos_dir_in_docker=ctx.repo_root_in_sandbox,
        per_installed_libraries_in_docker=ctx.preinstalled,
        readme_content=ctx.readme,
        files_in_root_dir=ctx.root_listing,
    )
    handle = None
    try:
        raw = complete(cfg, [ChatMessage("user", prompt)])
        parsed = parse_agent_reply(raw, origin_turn=0)
        if parsed.kind == "violation":
            session.turns.append(
                Turn(k=0, kind="protocol-violation", agent_reply_raw=raw,
                     violation_note=parsed.violation)
            )
            session.outcome = "protocol-error"
        elif parsed.kind == "termination":
            session.turns.append(Turn(k=0, kind="termination-turn", agent_reply_raw=raw))
            session.outcome = "agent-terminated"
        else:
            handle = create_sandbox(spec, ws)
            result = exec_script(handle, parsed.script)
            session.turns.append(
                Turn(k=0, kind="command-turn", agent_reply_raw=raw,
                     script=parsed.script, result=result)
            )
            session.outcome = (
                "succeeded" if success_probe(result, ws) else "turn-budget-exhausted"
            )
    except RepobuildError as exc:
        logger.warning("single-turn session for %s failed: %s", ws.repo_id, exc)
        session.outcome = "infra-error"
        session.error_detail = str(exc)
    finally:
        if handle is not None:
            destroy_sandbox(handle)
    if trajectory is not None:
        trajectory(session)
    return session
