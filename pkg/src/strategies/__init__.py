"""Round functions, one per training strategy."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from functools import partial

from src.errors import ConfigError
from src.federation import ClientState, RoundContext, RoundReport, ServerState
from src.strategies.baselines import run_baseline
from src.strategies.fedvc import run_round_em
from src.strategies.unified import run_round_unified

RoundFn = Callable[[ServerState, Sequence[ClientState], RoundContext], RoundReport]

STRATEGIES: dict[str, RoundFn] = {
    "local_only": partial(run_baseline, "local_only"),
    "fedavg": partial(run_baseline, "fedavg"),
    "fedavg_ft": partial(run_baseline, "fedavg_ft"),
    "fedprox": partial(run_baseline, "fedprox"),
    "fedvc_em": run_round_em,
    "fedvc_unified": run_round_unified,
}


def run_round(server: ServerState, clients: Sequence[ClientState], ctx: RoundContext) -> RoundReport:
    try:
        fn = STRATEGIES[ctx.strategy.name]
    except KeyError:
        raise ConfigError("strategy.name", f"unknown strategy {ctx.strategy.name!r}") from None
    return fn(server, clients, ctx)
