"""Template rationale generation and the refinement-client interface."""

from __future__ import annotations

import importlib.resources
import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

logger = logging.getLogger(__name__)

MARGIN_THRESHOLD = 0.7

#: Clause wording per cue, in the fixed sentence order.
CUE_CLAUSES = {
    "centrality": "holds central prominence",
    "area": "occupies a dominant share of the frame",
    "clarity": "appears in sharp focus",
    "lip": "engages in continuous active speech",
    "action": "performs salient physical actions",
}
CLAUSE_ORDER = ("centrality", "area", "clarity", "lip", "action")

FALLBACK_SENTENCE = "The person is the most contextually significant individual in the scene."

GUIDANCE_MODES = ("baseline", "unguided", "guided")

REFINED_PREFIX = "Refined rationale: "
REFINED_SUFFIX = " and anchors the unfolding scene."


@dataclass
class Rationale:
    retained_cues: list[tuple[str, float, str]]   # (cue, rank value, clause text)
    template_text: str
    refined_text: Optional[str] = None
    guidance_mode: str = "baseline"
    refine_warning: bool = False
    provenance: dict = field(default_factory=dict)  # cue -> rank value for every cue


def _join_clauses(clauses: list[str]) -> str:
    if len(clauses) == 1:
        return clauses[0]
    return ", ".join(clauses[:-1]) + " and " + clauses[-1]


def make_rationale(cue_ranks: dict[str, float],
                   margin_threshold: float = MARGIN_THRESHOLD) -> Rationale:
    """Retain cues whose percentile rank exceeds the margin threshold and
    verbalize them through the fixed clause templates."""
    retained = [(cue, float(cue_ranks[cue]), CUE_CLAUSES[cue])
                for cue in CLAUSE_ORDER
                if cue in cue_ranks and cue_ranks[cue] > margin_threshold]
    if retained:
        text = "The person " + _join_clauses([c for _, _, c in retained]) + "."
    else:
        text = FALLBACK_SENTENCE
    return Rationale(retained_cues=retained, template_text=text,
                     provenance={k: float(v) for k, v in cue_ranks.items()})


def clause_sentence(cues: list[str]) -> str:
    """Template body for a known cue subset (used by the synthetic oracle)."""
    ordered = [CUE_CLAUSES[c] for c in CLAUSE_ORDER if c in cues]
    if not ordered:
        return FALLBACK_SENTENCE
    return "The person " + _join_clauses(ordered) + "."


def refined_style_text(template_text: str) -> str:
    """The deterministic paraphrase shape shared by the mock client and the
    synthetic ground-truth rationales."""
    body = template_text.rstrip(".")
    body = body[0].lower() + body[1:] if body else body
    return REFINED_PREFIX + body + REFINED_SUFFIX


# ---------------------------------------------------------------------------
# Refinement clients
# ---------------------------------------------------------------------------

@dataclass
class RefineRequest:
    video_reference: str
    vip_id: int
    clauses: list[str]
    instruction: str


class RefinementClient(Protocol):
    def refine(self, request: RefineRequest) -> str: ...


def load_prompt() -> str:
    return importlib.resources.files("vipnet.resources").joinpath(
        "refine_prompt.txt").read_text(encoding="utf-8")


class MockRefinementClient:
    """Offline stand-in producing a deterministic paraphrase."""

    def refine(self, request: RefineRequest) -> str:
        if request.clauses:
            body = "the person " + _join_clauses(request.clauses)
            return REFINED_PREFIX + body + REFINED_SUFFIX
        return REFINED_PREFIX + "the person" + REFINED_SUFFIX


class HttpRefinementClient:
    """POSTs the request to an external refinement endpoint."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def refine(self, request: RefineRequest) -> str:
        import requests
        resp = requests.post(self.url, json={
            "video_reference": request.video_reference,
            "vip_id": request.vip_id,
            "clauses": request.clauses,
            "instruction": request.instruction,
        }, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()["text"]


def refine_rationale(rationale: Rationale, video_reference: str, vip_id: int,
                     mode: str, client: Optional[RefinementClient] = None) -> Rationale:
    """Fill ``refined_text`` according to the guidance mode.

    baseline returns the template unchanged; guided passes the retained cue
    clauses to the client, unguided omits them. Client failures fall back to
    the template with a warning flag.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    rationale.guidance_mode = mode
    if mode == "baseline":
        rationale.refined_text = rationale.template_text
        return rationale
    if client is None:
        client = MockRefinementClient()
    clauses = [c for _, _, c in rationale.retained_cues] if mode == "guided" else []
    request = RefineRequest(video_reference=video_reference, vip_id=vip_id,
                            clauses=clauses, instruction=load_prompt())
    try:
        rationale.refined_text = client.refine(request)
    except Exception as exc:  # timeout, connection, bad payload
        logger.warning("refinement client failed (%s); falling back to template", exc)
        rationale.refined_text = rationale.template_text
        rationale.refine_warning = True
    return rationale
