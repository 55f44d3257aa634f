"""Scenario-driven simulator: engines, towers, and the chain on one clock.

A scenario is a JSON document (schema below); running one is deterministic for
a fixed seed, byte-identical report included. One tick is one scheduling
quantum: actions fire, each actor steps once, towers step, handoffs relay,
and mining follows its cadence.

Scenario schema::

    {
      "name": str,
      "seed": int,
      "channel": {
        "alice_deposit": int, "bob_deposit": int, "epsilon": int,
        "timeout": int, "privacy_level": 1|2|3, "towers": bool,
        "d_bound": int, "report_every": int, "wt_reward": int,
        "chain_length": int, "shared_tower_paths": bool
      },
      "tick_budget": int, "auto_mine_every": int, "tower_send_interval": int,
      "actions": [
        {"actor": "alice"|"bob", "op": "pay", "amount": int, "repeat"?: int},
        {"actor": ..., "op": "add_htlc", "amount": int, "expiry_delta": int,
         "reveal": bool},
        {"actor": ..., "op": "settle_htlc"|"fail_htlc", "index": int},
        {"actor": ..., "op": "unilateral_exit"},
        {"actor": ..., "op": "cheat_exit"|"commit_stall", "state": int},
        {"actor": ..., "op": "cooperative_close", "fee": int},
        {"actor": ..., "op": "stall_at_step", "step": int},
        {"actor": ..., "op": "go_offline", "ticks": int},
        {"actor": ..., "op": "collude_tower", "tower": "wta"|"wtb",
         "stale_index": int},
        {"actor": "world", "op": "wait", "ticks": int},
        {"actor": "world", "op": "mine", "blocks": int}
      ],
      "assertions": [
        {"kind": "balance_eq"|"balance_ge"|"balance_le", "actor": str, "value": int},
        {"kind": "result", "actor": str, "value": str},
        {"kind": "phase", "actor": str, "value": str}
      ]
    }

Environment: ``OTS_CHANNELS_SCENARIO_DIR`` overrides where bare scenario names
are resolved; bundled scenarios ship inside the package.
"""

from __future__ import annotations

import copy
import json
import os
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .chain import Chain
from .channel import ALICE, BOB, CLOSED, OPEN, UPDATING, PeerEngine, other
from .crypto import SignerRegistry, hash160
from .htlc import ALICE_TO_BOB, BOB_TO_ALICE
from .watchtower import L3Statics, Watchtower, decode_record, encode_record


class ScenarioError(Exception):
    pass


class AssertionFailed(Exception):
    def __init__(self, failures: list[str]):
        super().__init__("; ".join(failures))
        self.failures = failures


DEFAULT_CHANNEL = dict(
    alice_deposit=50_000, bob_deposit=50_000, epsilon=1_000, timeout=6,
    privacy_level=1, towers=False, d_bound=16, report_every=0,
    wt_reward=200, chain_length=4096, shared_tower_paths=False,
)

_ADVERSARY_OPS = {"cheat_exit", "commit_stall"}


@dataclass
class Scenario:
    name: str
    seed: int
    channel: dict
    actions: list[dict]
    assertions: list[dict] = field(default_factory=list)
    tick_budget: int = 400
    auto_mine_every: int = 1
    tower_send_interval: int = 5

    @staticmethod
    def from_dict(raw: dict) -> "Scenario":
        try:
            channel = dict(DEFAULT_CHANNEL)
            channel.update(raw.get("channel", {}))
            actions = []
            for action in raw.get("actions", []):
                if "op" not in action:
                    raise KeyError("op")
                count = action.pop("repeat", 1)
                actions.extend([dict(action)] * count)
            return Scenario(
                name=raw["name"],
                seed=raw.get("seed", 0),
                channel=channel,
                actions=actions,
                assertions=raw.get("assertions", []),
                tick_budget=raw.get("tick_budget", 400),
                auto_mine_every=raw.get("auto_mine_every", 1),
                tower_send_interval=raw.get("tower_send_interval", 5),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario missing field {exc}") from exc

    @staticmethod
    def load(path_or_name: str) -> "Scenario":
        path = Path(path_or_name)
        if not path.exists():
            search = os.environ.get("OTS_CHANNELS_SCENARIO_DIR")
            if search:
                candidate = Path(search) / f"{path_or_name}.json"
                if candidate.exists():
                    path = candidate
        if not path.exists():
            name = path_or_name.removesuffix(".json")
            ref = resources.files("ots_channels").joinpath(f"scenarios/{name}.json")
            if ref.is_file():
                return Scenario.from_dict(json.loads(ref.read_text()))
            raise ScenarioError(f"scenario not found: {path_or_name}")
        return Scenario.from_dict(json.loads(path.read_text()))


@dataclass
class SimReport:
    name: str
    seed: int
    final_balances: dict[str, int]
    txids: list[str]
    assertion_results: list[dict]
    events: list[dict]
    ticks_run: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations and all(r["passed"] for r in self.assertion_results)

    def to_json(self, include_events: bool = True) -> str:
        body = {
            "name": self.name,
            "seed": self.seed,
            "final_balances": self.final_balances,
            "txids": self.txids,
            "assertions": self.assertion_results,
            "ticks_run": self.ticks_run,
            "violations": self.violations,
            "ok": self.ok,
        }
        if include_events:
            body["events"] = self.events
        return json.dumps(body, separators=(",", ":"), sort_keys=True)


# ---------------------------------------------------------------------------
# The simulated world
# ---------------------------------------------------------------------------

class World:
    """Chain, two engines, and their towers, stepped cooperatively."""

    def __init__(self, channel_config: dict, seed: int,
                 tower_send_interval: int = 5, auto_mine_every: int = 1):
        cfg = dict(DEFAULT_CHANNEL)
        cfg.update(channel_config)
        self.cfg = cfg
        master = random.Random(seed)
        self.registry = SignerRegistry()
        self.chain = Chain(self.registry)
        self.tick = 0
        self.tower_send_interval = tower_send_interval
        self.auto_mine_every = auto_mine_every
        self.htlc_secrets: dict[bytes, bytes] = {}
        self.htlc_order: list[bytes] = []
        self.ingest_history: dict[str, list[bytes]] = {"wta": [], "wtb": []}
        self.rng = random.Random(master.getrandbits(64))

        engine_opts = dict(
            epsilon=cfg["epsilon"], timeout=cfg["timeout"],
            privacy_level=cfg["privacy_level"], towers=cfg["towers"],
            d_bound=cfg["d_bound"], report_every=cfg["report_every"],
            wt_reward=cfg["wt_reward"], chain_length=cfg["chain_length"],
            shared_tower_paths=cfg["shared_tower_paths"],
        )
        self.alice = PeerEngine(ALICE, self.chain, master.getrandbits(64),
                                cfg["alice_deposit"], **engine_opts)
        self.bob = PeerEngine(BOB, self.chain, master.getrandbits(64),
                              cfg["bob_deposit"], **engine_opts)
        self.alice.connect(self.bob)
        self.bob.connect(self.alice)
        self.towers: dict[str, Watchtower] = {}
        if cfg["towers"]:
            self.towers["wta"] = Watchtower("wta", self.chain)
            self.towers["wtb"] = Watchtower("wtb", self.chain)
        self._registered = False
        self._fund()

    def engine(self, role: str) -> PeerEngine:
        return self.alice if role == ALICE else self.bob

    def _fund(self) -> None:
        # mint exactly what the funding transaction needs from each party
        connectors = 11 * self.cfg["epsilon"]
        bob_share = connectors // 2
        alice_owes = self.cfg["alice_deposit"] + (connectors - bob_share)
        bob_owes = self.cfg["bob_deposit"] + bob_share
        for engine, owes in ((self.alice, alice_owes), (self.bob, bob_owes)):
            outpoint = self.chain.mint(owes, _funding_lock(engine))
            engine.funding = [(outpoint, owes)]

    # -- channel lifecycle -------------------------------------------------------

    def open_channel(self, max_ticks: int = 60) -> None:
        self.alice.begin_setup()
        for _ in range(max_ticks):
            self.step()
            if self.alice.phase == OPEN and self.bob.phase == OPEN:
                break
        else:
            raise ScenarioError("channel failed to open")
        self._register_towers()

    def _register_towers(self) -> None:
        if not self.towers or self._registered:
            return
        self._registered = True
        for name, client in (("wta", self.alice), ("wtb", self.bob)):
            tower = self.towers[name]
            level = client.privacy_level
            if level == 1:
                tower.register(client.setup_built.txid, 1)
            elif level == 2:
                tower.register(client.wt_structure.txid, 2)
            else:
                params = client.params
                watched = other(client.role)
                statics = L3Statics(
                    keyset=params.keyset,
                    watched=watched,
                    watched_pub=params.k_b_pub if watched == BOB else params.k_a_pub,
                    epsilon=params.epsilon,
                    i_bal=params.i_bal,
                    wt_reward=params.wt_reward,
                    winner_address=(params.alice_address if client.role == ALICE
                                    else params.bob_address),
                    tower_address=(params.wta_address if client.role == ALICE
                                   else params.wtb_address),
                    name_prefix="wta_" if client.role == ALICE else "wtb_",
                    dispute_outpoint=(client.anchors.wta_disputes
                                      if client.role == ALICE
                                      else client.anchors.wtb_disputes),
                    initial_funds=client.anchors.initial_funds,
                )
                tower.register(client.wt_structure.txid, 3, statics)

    # -- stepping ------------------------------------------------------------------

    def step(self) -> None:
        self.tick += 1
        self.alice.tick(self.tick)
        self.bob.tick(self.tick)
        for tower in self.towers.values():
            tower.tick(self.tick)
        self._relay_tower_handoffs()
        if self.auto_mine_every and self.tick % self.auto_mine_every == 0:
            self.chain.mine_blocks(1)
        self.chain.audit_conservation()

    def _relay_tower_handoffs(self) -> None:
        for name, engine in (("wta", self.alice), ("wtb", self.bob)):
            tower = self.towers.get(name)
            if tower is None:
                continue
            for item in engine.tower_immediate:
                record = encode_record(item["channel"], item["level"], item["payload"])
                self.ingest_history[name].append(record)
                tower.ingest(record, self.tick)
            engine.tower_immediate.clear()
            if self.tick % self.tower_send_interval == 0:
                item = engine.tower_record()
                if item is not None:
                    record = encode_record(item["channel"], item["level"],
                                           item["payload"])
                    self.ingest_history[name].append(record)
                    tower.ingest(record, self.tick)

    def run_ticks(self, n: int) -> None:
        for _ in range(n):
            self.step()

    def run_until(self, predicate, max_ticks: int = 400) -> bool:
        for _ in range(max_ticks):
            if predicate():
                return True
            self.step()
        return predicate()

    # -- conveniences used by tests -----------------------------------------------

    def pay(self, payer_role: str, amount: int, max_ticks: int = 40) -> None:
        payer = self.engine(payer_role)
        payer.start_update({"kind": "pay", "amount": amount})
        done = self.run_until(
            lambda: payer.ready_for_action() or payer.phase not in (OPEN, "updating"),
            max_ticks,
        )
        if not done or payer.snapshot.isn != self.engine(other(payer_role)).snapshot.isn:
            raise ScenarioError("payment did not complete")

    def fork(self) -> "World":
        """Deep copy for branching adversarial explorations."""
        return copy.deepcopy(self)

    def balances(self) -> dict[str, int]:
        out = {
            "alice": self.alice.onchain_balance(),
            "bob": self.bob.onchain_balance(),
            "fees": self.chain.total_fees,
        }
        params = self.alice.params
        if params is not None and params.wta_address is not None:
            out["wta"] = self.chain.balance_of(params.wta_address)
            out["wtb"] = self.chain.balance_of(params.wtb_address)
        return out


def _funding_lock(engine: PeerEngine):
    from .script import OutputLock, csigv

    return OutputLock.single((csigv(engine.sig_pub),))


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------

class _Script:
    """One global ordered queue: an action starts when its actor is free."""

    def __init__(self, actions: list[dict]):
        self.queue = list(actions)
        self.wait_until = 0

    def due(self, tick: int) -> dict | None:
        if not self.queue or tick < self.wait_until:
            return None
        return self.queue[0]


def run(scenario: Scenario) -> SimReport:
    world = World(scenario.channel, scenario.seed,
                  tower_send_interval=scenario.tower_send_interval,
                  auto_mine_every=scenario.auto_mine_every)
    # adversarial actors keep their old exit material
    for action in scenario.actions:
        if action["op"] in _ADVERSARY_OPS:
            world.engine(action["actor"]).retain_history = True
    world.open_channel()

    script = _Script(scenario.actions)
    violations: list[str] = []
    while world.tick < scenario.tick_budget:
        while True:
            action = script.due(world.tick)
            if action is None or not _startable(world, action):
                break
            script.queue.pop(0)
            _execute(world, action, script)
        try:
            world.step()
        except Exception as exc:  # audits raise on violations
            violations.append(str(exc))
            break
        if _quiescent(world, script):
            break

    return _build_report(scenario, world, violations)


def _startable(world: World, action: dict) -> bool:
    op = action["op"]
    name = action.get("actor", "world")
    if name == "world":
        return True
    both_idle = world.alice.ready_for_action() and world.bob.ready_for_action()
    engine = world.engine(name)
    if op in ("pay", "add_htlc", "settle_htlc", "fail_htlc", "cooperative_close",
              "unilateral_exit", "go_offline", "collude_tower", "stall_at_step"):
        # ordinary actions wait until both parties are idle
        return both_idle
    if op in ("cheat_exit", "commit_stall"):
        if engine.exit_drive is not None or engine.phase == CLOSED:
            return False
        if engine.halt_at_step is not None:
            return True  # a frozen adversary acts regardless of the dance
        return both_idle or engine.phase not in (OPEN, UPDATING)
    return True


def _execute(world: World, action: dict, script: _Script) -> None:
    op = action["op"]
    name = action.get("actor", "world")
    if name == "world":
        if op == "wait":
            script.wait_until = world.tick + action["ticks"]
        elif op == "mine":
            world.chain.mine_blocks(action["blocks"])
        else:
            raise ScenarioError(f"unknown world op {op}")
        return
    engine = world.engine(name)
    if op == "pay":
        engine.start_update({"kind": "pay", "amount": action["amount"]})
    elif op == "add_htlc":
        preimage = world.rng.randbytes(32)
        payment_hash = hash160(preimage)
        world.htlc_secrets[payment_hash] = preimage
        world.htlc_order.append(payment_hash)
        direction = ALICE_TO_BOB if name == "alice" else BOB_TO_ALICE
        if action.get("reveal", False):
            receiver = world.engine(other(name))
            receiver.htlc_preimages[payment_hash] = preimage
        engine.start_update({
            "kind": "add_htlc", "direction": direction,
            "amount": action["amount"], "payment_hash": payment_hash,
            "expiry": world.chain.height + action["expiry_delta"],
        })
    elif op == "settle_htlc":
        payment_hash = world.htlc_order[action["index"]]
        engine.start_update({"kind": "settle_htlc", "payment_hash": payment_hash,
                             "preimage": world.htlc_secrets[payment_hash]})
    elif op == "fail_htlc":
        payment_hash = world.htlc_order[action["index"]]
        engine.start_update({"kind": "fail_htlc", "payment_hash": payment_hash})
    elif op == "unilateral_exit":
        engine.start_unilateral_exit()
    elif op == "cheat_exit":
        engine.start_cheat_exit(action["state"])
    elif op == "commit_stall":
        engine.start_commit_stall(action.get("state"))
    elif op == "cooperative_close":
        engine.start_cooperative_close(action.get("fee", 0))
    elif op == "stall_at_step":
        engine.halt_at_step = action["step"]
    elif op == "go_offline":
        engine.offline_until = world.tick + action["ticks"]
    elif op == "collude_tower":
        tower = world.towers[action["tower"]]
        record = world.ingest_history[action["tower"]][action["stale_index"]]
        _, _, payload = decode_record(record)
        tower.arm_betrayal(payload)
    else:
        raise ScenarioError(f"unknown op {op}")


def _quiescent(world: World, script: _Script) -> bool:
    if script.queue:
        return False
    if world.chain.mempool:
        return False
    for engine in (world.alice, world.bob):
        if engine.phase != CLOSED:
            return False
        watch = engine.finalize_watch
        if watch is not None:
            state = watch["state"]
            if len(watch["claimed"]) < len(state.htlcs):
                return False
    return True


def _build_report(scenario: Scenario, world: World,
                  violations: list[str]) -> SimReport:
    try:
        world.chain.audit_conservation()
        world.chain.audit_replay()
    except Exception as exc:
        violations.append(str(exc))
    events: list[dict] = []
    sources = [("alice", world.alice.log), ("bob", world.bob.log)]
    sources += [(name, tower.log) for name, tower in sorted(world.towers.items())]
    for rank, (name, log) in enumerate(sources):
        for seq, entry in enumerate(log):
            events.append({"_k": (entry.get("tick", 0), rank, seq), **entry})
    for seq, line in enumerate(world.chain.event_log):
        block = json.loads(line)
        events.append({"_k": (block["height"], 99, seq), "actor": "chain",
                       "event": "block", **block})
    events.sort(key=lambda e: e["_k"])
    for e in events:
        del e["_k"]
    txids = [tx.txid.hex() for _, tx in world.chain.confirmed_log]
    balances = world.balances()
    results = [_evaluate(a, world, balances) for a in scenario.assertions]
    return SimReport(
        name=scenario.name,
        seed=scenario.seed,
        final_balances=balances,
        txids=txids,
        assertion_results=results,
        events=events,
        ticks_run=world.tick,
        violations=violations,
    )


def _evaluate(assertion: dict, world: World, balances: dict) -> dict:
    kind = assertion["kind"]
    passed = False
    actual = None
    if kind in ("balance_eq", "balance_ge", "balance_le"):
        actual = balances.get(assertion["actor"], 0)
        target = assertion["value"]
        passed = {"balance_eq": actual == target,
                  "balance_ge": actual >= target,
                  "balance_le": actual <= target}[kind]
    elif kind == "result":
        actual = world.engine(assertion["actor"]).final_result
        passed = actual == assertion["value"]
    elif kind == "phase":
        actual = world.engine(assertion["actor"]).phase
        passed = actual == assertion["value"]
    else:
        actual = f"unknown assertion kind {kind}"
    return {**assertion, "actual": actual, "passed": passed}
