import asyncio
import socket
import sys
import time

import pytest

from beaconmesh.engine import ScriptedBehavior, ScriptedEngine
from beaconmesh.ledger import make_record
from beaconmesh.protocol import (
    BeaconBody,
    Envelope,
    KeyPair,
    MsgType,
    TaskBody,
    TaskResultBody,
    encode,
    sign,
)
from beaconmesh.runtime import InMemoryNetwork, InProcessCluster, Node, NodeConfig, StartupError, TcpTransport, start_node
from beaconmesh.runtime.cluster import seeded_keys
from beaconmesh.voting import NoSurvivingChains

sys.path.insert(0, __file__.rsplit("/", 1)[0])
import coffee_shop as cs  # noqa: E402

UNIFORM = [1.0] * 8


def cfg(name, port, roles=("executor",), **kw):
    return NodeConfig(name=name, host="mem", port=port, roles=list(roles), capability_vector=kw.pop("cap", UNIFORM), **kw)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------- lifecycle


def test_single_node_ledger_has_itself(run):
    async def go():
        net = InMemoryNetwork()
        node = await start_node(cfg("solo", 7000), transport=net.transport(("mem", 7000)), background_loops=False)
        try:
            snap = node.ledger.snapshot()
            return len(snap), node.agent_id in snap.records, node.status()
        finally:
            await node.shutdown()

    size, present, status = run(go())
    assert size == 1 and present
    assert status["running"] and status["ledger_size"] == 1


def test_three_nodes_converge_within_two_rounds(run):
    async def go():
        # every node seeds off the next one
        configs = [cfg(f"n{i}", 7100 + i, seeds=[f"mem:{7100 + (i + 1) % 3}"]) for i in range(3)]
        cluster = InProcessCluster(configs)
        for c in configs:
            n = Node(c, cluster.network.transport((c.host, c.port)), keys=seeded_keys(c.name))
            await n.start(background_loops=False)
            cluster.nodes[c.name] = n
        await cluster.converge(2)
        sizes = [len(n.ledger.snapshot()) for n in cluster.nodes.values()]
        ok = cluster.converged()
        await cluster.shutdown()
        return sizes, ok

    sizes, ok = run(go())
    assert sizes == [3, 3, 3] and ok


def test_same_address_is_startup_error(run):
    async def go():
        net = InMemoryNetwork()
        first = await start_node(cfg("a", 7200), transport=net.transport(("mem", 7200)), background_loops=False)
        try:
            with pytest.raises(StartupError):
                await start_node(cfg("b", 7200), transport=net.transport(("mem", 7200)), background_loops=False)
        finally:
            await first.shutdown()

    run(go())


def test_engine_probe_failure_is_startup_error(run):
    bad = cfg("r", 7300, engine={"kind": "remote", "base_url": "http://127.0.0.1:9/v1", "model": "m",
                                 "timeout_s": 1, "api_key_env": None})

    async def go():
        with pytest.raises(StartupError, match="probe"):
            await start_node(bad, transport=InMemoryNetwork().transport(("mem", 7300)), background_loops=False)

    run(go())


def test_taxonomy_dimension_mismatch(run):
    with pytest.raises(StartupError):
        Node(cfg("x", 7301, cap=[1.0] * 4, dim=4), InMemoryNetwork().transport(("mem", 7301)))


def test_background_heartbeats_keep_record_fresh(run):
    async def go():
        net = InMemoryNetwork()
        node = await start_node(cfg("hb", 7400, heartbeat_interval_s=0.05, sync_interval_s=0.05),
                                transport=net.transport(("mem", 7400)))
        before = node.ledger.get(node.agent_id).last_seen
        await asyncio.sleep(0.2)
        after = node.ledger.get(node.agent_id).last_seen
        await node.shutdown()
        return before, after, node._loops

    before, after, loops = run(go())
    assert after > before and loops == []


# ----------------------------------------------------------------- dispatch


async def _pair(latency_ms=0.0, x_engine=None):
    configs = [cfg("X", 7500, cap=cs._vec(logic=1.0)), cfg("Y", 7501, roles=("planner", "executor"))]
    engines = {"X": x_engine} if x_engine else {}
    return await InProcessCluster(configs, engines, latency_ms=latency_ms).start()


def _env(keys, msg_type, slot, payload, sent_at=1):
    task_id, chain_id, k = slot
    return sign(Envelope(msg_type, keys.agent_id, task_id, chain_id, k, payload, sent_at), keys.private_key)


def test_beacon_handler_replies_with_match_score(run):
    async def go():
        cl = await _pair()
        x, y = cl["X"], cl["Y"]
        body = BeaconBody(tuple(cs._vec(logic=0.6, reading_comprehension=0.8)), "Is it necessary?", 0)
        bids = await y.beacon(("t", 1, 1), body, [x.agent_id], 1.0)
        await cl.shutdown()
        return bids, x.agent_id

    bids, xid = run(go())
    assert [b.agent_id for b in bids] == [xid]
    assert bids[0].body.score == pytest.approx(0.6)


def test_planner_only_node_ignores_executor_beacons(run):
    async def go():
        configs = [cfg("P", 7510, roles=("planner",)), cfg("Y", 7511)]
        cl = await InProcessCluster(configs).start()
        body = BeaconBody(tuple(UNIFORM), "q?", 0)
        bids = await cl["Y"].beacon(("t", 1, 1), body, [cl["P"].agent_id], 0.1)
        plan_bids = await cl["Y"].beacon(("t", 0, 0), body, [cl["P"].agent_id], 0.5)
        await cl.shutdown()
        return bids, plan_bids

    bids, plan_bids = run(go())
    assert bids == [] and len(plan_bids) == 1


def test_duplicate_task_result_applied_once(run):
    slow = ScriptedEngine(ScriptedBehavior(default="$\\boxed{real}$", latency_ms=300))

    async def go():
        cl = await _pair(x_engine=slow)
        x, y = cl["X"], cl["Y"]
        slot = ("t", 1, 1)
        pending = asyncio.create_task(y.dispatch(slot, x.agent_id, TaskBody("q?", "bg", (), (), (1.0,)), 2.0))
        await asyncio.sleep(0.05)
        forged = encode(_env(seeded_keys("X"), MsgType.TASK_RESULT, slot, TaskResultBody("first", 0.9), 12345))
        await y.receive(forged)
        await y.receive(forged)
        result = await pending
        handled = y.handled[MsgType.TASK_RESULT]
        audits = [a["reason"] for a in y.audit]
        await cl.shutdown()
        return result, handled, audits

    result, handled, audits = run(go())
    assert result.final_answer == "first"
    assert handled == 1
    assert audits.count("duplicate") == 1


def test_bad_signature_dropped_and_audited(run):
    async def go():
        cl = await _pair()
        y = cl["Y"]
        env = _env(seeded_keys("X"), MsgType.TASK_RESULT, ("t", 1, 1), TaskResultBody("a", 0.5))
        tampered = Envelope(env.msg_type, env.sender, env.task_id, env.chain_id, env.subtask_index,
                            TaskResultBody("b", 0.5), env.sent_at, env.signature)
        await y.receive(encode(tampered))
        out = dict(y.handled), list(y.audit)
        await cl.shutdown()
        return out

    handled, audit = run(go())
    assert all(v == 0 for v in handled.values())
    assert [a["reason"] for a in audit] == ["bad_signature"]


def test_unknown_sender_and_garbage_audited(run):
    async def go():
        cl = await _pair()
        y = cl["Y"]
        stranger = KeyPair.from_seed(b"\x07" * 32)
        await y.receive(encode(_env(stranger, MsgType.TASK_RESULT, ("t", 1, 1), TaskResultBody("a", 0.5))))
        await y.receive(b"{not json")
        out = [a["reason"] for a in y.audit], sum(y.handled.values())
        await cl.shutdown()
        return out

    reasons, handled = run(go())
    assert reasons == ["unknown_sender", "decode_error"] and handled == 0


def test_record_registered_after_bootstrap_is_accepted(run):
    async def go():
        cl = await _pair()
        y = cl["Y"]
        newcomer = KeyPair.from_seed(b"\x09" * 32)
        y.ledger.register(make_record(newcomer, "mem", 7999, UNIFORM, ["executor"]))
        await y.receive(encode(_env(newcomer, MsgType.TASK_RESULT, ("t", 1, 1), TaskResultBody("a", 0.5))))
        out = y.handled[MsgType.TASK_RESULT], y.audit
        await cl.shutdown()
        return out

    assert run(go()) == (1, [])


# ------------------------------------------------------------------- submit


def test_degenerate_pipeline_single_planner_single_step(run):
    step = [("What is the sum of 2 and 3?", "5")]
    engines = {
        "P": ScriptedEngine(cs.planner_behavior(step)),
        "E": ScriptedEngine(ScriptedBehavior(((f'solve the sub-task: "Q1: {step[0][0]}"', "$\\boxed{5}$"),))),
    }

    async def go():
        configs = [cfg("P", 7600, roles=("planner",)), cfg("E", 7601)]
        async with InProcessCluster(configs, engines) as cl:
            return await cl["E"].submit(cs.task("deg"), m=1)

    out = run(go())
    assert out.verdict.answer == "5"
    assert out.verdict.contributing_chains == (0,)
    assert len(out.chains) == 1 and out.failures == {}


def test_coffee_shop_verdict(run):
    async def go():
        async with InProcessCluster(cs.configs(), cs.engines()) as cl:
            return await cl["U"].submit(cs.task(), m=3)

    out = run(go())
    assert out.verdict.answer == "no"
    assert out.verdict.per_answer_weights == pytest.approx({"no": 1.9, "yes": 0.92})
    kinds = {e["event"] for e in out.events}
    assert {"task_start", "task_done", "vote_start", "vote_done", "chain_done"} <= kinds


def test_all_executors_dead_fails_with_diagnostic(run):
    async def go():
        async with InProcessCluster(cs.configs(beacon_timeout_s=0.05, step_timeout_s=0.2), cs.engines()) as cl:
            for name in ("R", "L", "W", "A"):
                cl.kill(name)
            # the coordinator is also an executor; make it refuse work too
            cl["U"].config = cl["U"].config.model_copy(update={"roles": ["planner"]})
            start = time.perf_counter()
            with pytest.raises(NoSurvivingChains):
                await cl["U"].submit(cs.task(), m=3)
            return time.perf_counter() - start

    assert run(go()) < 10


def test_executor_killed_mid_task_still_yields_verdict(run):
    async def go():
        async with InProcessCluster(cs.configs(beacon_timeout_s=0.1, step_timeout_s=0.3), cs.engines(20)) as cl:
            async def crash():
                await asyncio.sleep(0.05)
                cl.kill("L")

            killer = asyncio.create_task(crash())
            out = await cl["U"].submit(cs.task(), m=3)
            await killer
            return out

    out = run(go())
    assert out.verdict.answer in ("no", "yes")
    assert len(out.chains) + len(out.failures) == 3


def test_task_deadline(run):
    from beaconmesh.runtime import TaskDeadlineExceeded

    async def go():
        async with InProcessCluster(cs.configs(task_deadline_s=0.2), cs.engines(150)) as cl:
            with pytest.raises(TaskDeadlineExceeded):
                await cl["U"].submit(cs.task(), m=3)
            return [e["status"] for e in cl["U"].events.events("coffee") if e["event"] == "task_done"]

    assert run(go()) == ["failed"]


# --------------------------------------------------------------------- TCP


def test_tcp_beacon_round_and_port_release(run):
    px, py = free_port(), free_port()

    def tcfg(name, port):
        return NodeConfig(name=name, host="127.0.0.1", port=port, roles=["executor"], capability_vector=UNIFORM)

    async def go():
        x = await start_node(tcfg("X", px), keys=seeded_keys("X"), background_loops=False)
        y = await start_node(tcfg("Y", py), keys=seeded_keys("Y"), background_loops=False)
        # no gateways here, so exchange ledgers by hand
        x.ledger.merge(y.ledger.snapshot())
        y.ledger.merge(x.ledger.snapshot())
        bids = await y.beacon(("t", 1, 1), BeaconBody(tuple(UNIFORM), "q?", 0), [x.agent_id], 2.0)
        with pytest.raises(StartupError):
            await start_node(tcfg("Z", px), background_loops=False)
        await x.shutdown()
        await y.shutdown()
        again = await start_node(tcfg("X", px), transport=TcpTransport([("127.0.0.1", px)]), background_loops=False)
        await again.shutdown()
        return bids

    bids = run(go())
    assert len(bids) == 1 and bids[0].body.score == pytest.approx(1.0)
