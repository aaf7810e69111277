"""Dealer / service / manufacturer purchasing dialogue.

Round 1 is the dealer, round 2 service, round 3 manufacturer, rounds 4..n-1
cycle through the three roles again, and round n is the dealer's synthesis.
The history is append-only: every round returns a new state.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ._seeding import derive_seed
from .backends import BackendError, ChatBackend, ParseError, chat, parse_wholesale, select_backend
from .symbolic import (
    COMPLEXITY_PENALTY, ExpressionSyntaxError, RuleFit, evaluate_rule, parse_expression,
)

ROLES = ("dealer", "service", "manufacturer")
BACKGROUND = "background"
MIN_ROUNDS = 4
DEFAULT_ROUNDS = 6
TEMPLATE_FILES = {"dealer": "dealer.txt", "service": "service.txt",
                  "manufacturer": "manufacturer.txt", "dealer_final": "dealer_final.txt"}


class DialogueAborted(RuntimeError):
    """A backend failed mid-dialogue; ``state`` holds the history so far."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


def role_schedule(n: int) -> list[str]:
    if n < MIN_ROUNDS:
        raise ValueError(f"a dialogue needs at least {MIN_ROUNDS} rounds, got {n}")
    middle = [ROLES[k % 3] for k in range(n - 1)]
    return middle + ["dealer"]


def load_role_templates(directory=None) -> dict:
    """Role instructions from ``directory`` (falls back to the bundled defaults)."""
    out = {}
    for key, fname in TEMPLATE_FILES.items():
        if directory is not None and (Path(directory) / fname).exists():
            out[key] = (Path(directory) / fname).read_text(encoding="utf-8").strip()
        else:
            out[key] = (resources.files("econsandbox") / "templates" / "roles" / fname
                        ).read_text(encoding="utf-8").strip()
    return out


@dataclass(frozen=True)
class DialogueState:
    background: str
    history: tuple[tuple[str, str], ...]
    t: int
    n: int

    def __post_init__(self):
        if len(self.history) != self.t + 1:
            raise ValueError("history length must equal t + 1")
        if not self.history or self.history[0] != (BACKGROUND, self.background):
            raise ValueError("history must start with the background entry")

    @property
    def done(self) -> bool:
        return self.t >= self.n


def init_dialogue(background: str, n: int = DEFAULT_ROUNDS) -> DialogueState:
    role_schedule(n)
    return DialogueState(background, ((BACKGROUND, background),), 0, n)


def serialize_history(history) -> str:
    return "\n\n".join(f"[{role}]\n{text}" for role, text in history)


def transcript_records(history) -> list[dict]:
    return [{"round": i, "role": role, "text": text} for i, (role, text) in enumerate(history)]


def write_transcript(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in transcript_records(history):
            fh.write(json.dumps(rec) + "\n")


def advance_round(state: DialogueState, pool, templates: dict | None = None,
                  seed: int = 0) -> DialogueState:
    if state.done:
        raise ValueError("dialogue already finished")
    templates = templates or load_role_templates()
    rnd = state.t + 1
    role = role_schedule(state.n)[state.t]
    final = rnd == state.n
    instruction = templates["dealer_final" if final else role]
    header = f"role: {role}\nround: {rnd} of {state.n}\nfinal: {'yes' if final else 'no'}"
    messages = [("system", f"{header}\n\n{instruction}"),
                ("user", serialize_history(state.history))]
    backend = pool if isinstance(pool, ChatBackend) else select_backend(pool, derive_seed(seed, rnd))
    try:
        text = chat(backend, messages)
    except BackendError as exc:
        raise DialogueAborted(f"round {rnd} ({role}) failed: {exc}", state) from exc
    return DialogueState(state.background, state.history + ((role, text),), rnd, state.n)


def run_dialogue(background: str, n: int, pool, templates: dict | None = None,
                 seed: int = 0) -> tuple:
    templates = templates or load_role_templates()
    state = init_dialogue(background, n)
    while not state.done:
        state = advance_round(state, pool, templates, seed)
    return state.history


def simulate_wholesale(background: str, n: int, pool, templates=None, seed: int = 0,
                       candidate_ids=None):
    """Run the dialogue and parse the final dealer turn.

    Returns ``(decision, history)``.  Parse errors carry the transcript as
    ``exc.transcript``.
    """
    history = run_dialogue(background, n, pool, templates, seed)
    try:
        return parse_wholesale(history, candidate_ids), history
    except ParseError as exc:
        exc.transcript = history
        raise


class ScriptedRoleMock(ChatBackend):
    """Replies chosen by role and round.

    ``script`` maps a role (or ``"dealer_final"``) to either a fixed string or
    a callable ``(round, history_text) -> str``.
    """

    def __init__(self, script: dict, name: str = "scripted"):
        self.script = script
        self.name = name

    def complete(self, messages):
        system = messages[0][1]
        role = re.search(r"^role: (\w+)", system, re.M).group(1)
        rnd = int(re.search(r"^round: (\d+)", system, re.M).group(1))
        final = re.search(r"^final: (\w+)", system, re.M).group(1) == "yes"
        key = "dealer_final" if final and "dealer_final" in self.script else role
        reply = self.script.get(key, f"{role} has nothing to add in round {rnd}.")
        return reply(rnd, messages[-1][1]) if callable(reply) else reply


_EXPR_LINE = re.compile(r"^\s*(?:formula|expression|q)\s*[:=]\s*(.+?)\s*$", re.I | re.M)


def extract_proposal(text: str) -> str | None:
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("{") and s.endswith("}"):
            try:
                obj = json.loads(s)
            except ValueError:
                continue
            if isinstance(obj, dict) and isinstance(obj.get("expression"), str):
                return obj["expression"]
    m = _EXPR_LINE.search(text)
    return m.group(1) if m else None


def refine_rule_via_dialogue(fit: RuleFit, dataset, background: str, pool, n: int = DEFAULT_ROUNDS,
                             templates=None, seed: int = 0, penalty: float = COMPLEXITY_PENALTY):
    """Let the dialogue propose a better formula; keep it only if it scores better.

    Returns ``(fit, status)`` with status ``"improved"``, ``"retained"``,
    ``"no-proposal"`` or ``"unparseable"``.
    """
    context = (f"{background}\n\nCurrent purchasing formula: q = {fit.expression}\n"
               f"RMSE {fit.rmse:.6g}, complexity {fit.complexity} nodes.")
    history = run_dialogue(context, n, pool, templates, seed)
    proposal = extract_proposal(history[-1][1])
    if proposal is None:
        return fit, "no-proposal"
    try:
        expr = parse_expression(proposal)
        rmse, _ = evaluate_rule(expr, dataset)
    except (ExpressionSyntaxError, ValueError):
        return fit, "unparseable"
    candidate = RuleFit(expr, rmse, expr.complexity, fit.dataset_id)
    if candidate.penalized_score(penalty) < fit.penalized_score(penalty):
        return candidate, "improved"
    return fit, "retained"



def relay_dealer_mock(agent: ChatBackend, name: str = "scripted-relay") -> ScriptedRoleMock:
    """Scripted roles whose closing dealer turn relays ``agent``'s answer to the background.

    Lets a retail mock agent stand in for the whole purchasing committee.
    """
    return ScriptedRoleMock({
        "dealer": lambda rnd, _: f"Dealer notes for round {rnd}: checking stock levels and margins.",
        "service": lambda rnd, _: f"Service notes for round {rnd}: recent customer feedback is steady.",
        "manufacturer": lambda rnd, _: f"Manufacturer notes for round {rnd}: supply is available.",
        "dealer_final": lambda rnd, text: agent.complete([("user", text)]),
    }, name)
