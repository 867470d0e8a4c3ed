"""Centralized federated-learning (CFL) orchestration models.

Two reconstructions are provided:

* :func:`conventional_cfl` is untimed. The server hands a round start to each
  client in turn over ``ch2client[i]``, then opens the reply phase, collects
  one ``ch2server`` reply per client and raises ``terminated``. Replies are
  held back until ``phase == 2``; a broadcast nobody listens to is lost, so an
  early reply would leave the server waiting forever.
* :func:`stochastic_cfl` adds spacecraft. Each ``SV`` instance integrates its
  true anomaly and broadcasts ``reset[nodeId]`` at every periapsis pass. A
  client may only talk to the ground station right after its spacecraft passed
  periapsis, so the round spans two revolutions: during the first the server
  distributes the model, during the second the clients reply.

The builders produce :class:`~ksmc.defs.ModelDefs` that are equal to what the
bundled ``.ksm`` files parse to, so file and code cannot drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

from ksmc import defs as D
from ksmc.automata import Network, build_network
from ksmc.errors import ValidationError
from ksmc.orbital import TWO_PI, Orbit, make_orbit


@dataclass(frozen=True)
class Spacecraft:
    node_id: int
    orbit_id: int
    anomaly: float


@dataclass(frozen=True)
class Scenario:
    orbits: tuple[Orbit, ...]
    spacecraft: tuple[Spacecraft, ...]
    server_id: int
    client_ids: tuple[int, ...]
    orbit_names: tuple[str, ...] = ()

    @property
    def n_clients(self) -> int:
        return len(self.client_ids)

    def names(self) -> tuple[str, ...]:
        if self.orbit_names:
            return self.orbit_names
        return tuple(f"orbit{k}" for k in range(len(self.orbits)))

    def validate(self) -> None:
        if not self.orbits:
            raise ValidationError("scenario needs at least one orbit")
        if self.orbit_names and len(self.orbit_names) != len(self.orbits):
            raise ValidationError("one name per orbit required")
        ids = [sc.node_id for sc in self.spacecraft]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate spacecraft nodeIds {sorted(ids)}")
        if sorted(ids) != list(range(len(ids))):
            raise ValidationError(f"spacecraft nodeIds must be 0..{len(ids) - 1}, got {sorted(ids)}")
        if sorted(self.client_ids) != sorted(ids) or len(set(self.client_ids)) != len(self.client_ids):
            raise ValidationError("each client must reside on exactly one spacecraft")
        if self.server_id in self.client_ids:
            raise ValidationError(f"server id {self.server_id} collides with a client id")
        if self.server_id != len(ids):
            raise ValidationError(f"server id must be {len(ids)} (one past the last client)")
        for sc in self.spacecraft:
            if not 0 <= sc.orbit_id < len(self.orbits):
                raise ValidationError(f"spacecraft {sc.node_id} names unknown orbit {sc.orbit_id}")
            if not 0 <= sc.anomaly < TWO_PI:
                raise ValidationError(f"spacecraft {sc.node_id}: initial anomaly {sc.anomaly} outside [0, 2*pi)")
        if not self.client_ids:
            raise ValidationError("scenario needs at least one client")


def default_scenario() -> Scenario:
    """One orbit (a=10, e=0.2, T=1); spacecraft 0 starts at apoapsis, spacecraft 1 at periapsis."""
    return Scenario(
        orbits=(make_orbit(10, 0.2, 1),),
        spacecraft=(Spacecraft(0, 0, math.pi), Spacecraft(1, 0, 0.0)),
        server_id=2,
        client_ids=(0, 1),
        orbit_names=("leo",),
    )


# --- tiny expression builders -------------------------------------------------

def _n(v) -> D.Num:
    return D.Num(v)


def _v(name: str, index=None) -> D.Var:
    if isinstance(index, (int, str)):
        index = _n(index) if isinstance(index, int) else D.Var(index)
    return D.Var(name, index)


def _b(op: str, left, right) -> D.Binary:
    return D.Binary(op, left, right)


def _two_pi() -> D.Binary:
    return _b("*", _n(2), D.Pi())


def _asg(target: D.Var, value) -> D.Assign:
    return D.Assign(target, value)


def _last_client_minus_one() -> D.Binary:
    return _b("-", D.Var("NClients"), _n(1))


# --- conventional model -------------------------------------------------------

def conventional_defs(n_clients: int = 2) -> D.ModelDefs:
    if n_clients < 1:
        raise ValidationError("n_clients must be at least 1")
    cnt = D.Var("cnt")
    last = _last_client_minus_one()
    server_edges = []
    if n_clients > 1:
        server_edges.append(D.EdgeDef("sphase1", "sphase1", _b("<", cnt, last),
                                      D.Sync("ch2client", cnt, "!"), (_asg(cnt, _b("+", cnt, _n(1))),)))
    server_edges.append(D.EdgeDef("sphase1", "sphase2", _b("==", cnt, last),
                                  D.Sync("ch2client", cnt, "!"), (_asg(cnt, _n(0)), _asg(D.Var("phase"), _n(2)))))
    if n_clients > 1:
        server_edges.append(D.EdgeDef("sphase2", "sphase2", _b("<", cnt, last),
                                      D.Sync("ch2server", None, "?"), (_asg(cnt, _b("+", cnt, _n(1))),)))
    server_edges.append(D.EdgeDef("sphase2", "sphase3", _b("==", cnt, last),
                                  D.Sync("ch2server", None, "?"), (_asg(cnt, _n(0)),)))
    server_edges.append(D.EdgeDef("sphase3", "send", None, None, (_asg(D.Var("terminated"), _n(1)),)))
    server = D.Template(
        "Server", ("nodeId",),
        (D.VarDecl("int", "cnt", None, (_n(0),)),),
        (D.LocationDef("sphase1", initial=True), D.LocationDef("sphase2"),
         D.LocationDef("sphase3"), D.LocationDef("send", accepting=True)),
        tuple(server_edges),
    )
    client = D.Template(
        "Client", ("nodeId",), (),
        (D.LocationDef("cphase1", initial=True), D.LocationDef("cphase2"),
         D.LocationDef("cend", accepting=True)),
        (D.EdgeDef("cphase1", "cphase2", None, D.Sync("ch2client", D.Var("nodeId"), "?")),
         D.EdgeDef("cphase2", "cend", _b("==", D.Var("phase"), _n(2)), D.Sync("ch2server", None, "!"))),
    )
    instances = [D.InstanceDecl("server", "Server", (D.Var("FLSrvId"),))]
    instances += [D.InstanceDecl(f"client{i}", "Client", (_n(i),)) for i in range(n_clients)]
    return D.ModelDefs(
        orbits=(),
        consts=(D.ConstDecl("FLSrvId", _n(n_clients)), D.ConstDecl("NClients", _n(n_clients))),
        channels=(D.ChannelDecl("ch2client", n_clients), D.ChannelDecl("ch2server")),
        variables=(D.VarDecl("int", "terminated", None, (_n(0),)), D.VarDecl("int", "phase", None, (_n(1),))),
        templates=(server, client),
        instances=tuple(instances),
    )


def conventional_cfl(n_clients: int = 2) -> Network:
    return build_network(conventional_defs(n_clients))


# --- stochastic model ---------------------------------------------------------

def _anomaly_literal(v: float) -> D.Expr:
    if v == math.pi:
        return D.Pi()
    if v == int(v):
        return _n(int(v))
    return _n(v)


def stochastic_defs(scenario: Scenario | None = None) -> D.ModelDefs:
    sc = scenario or default_scenario()
    sc.validate()
    n = sc.n_clients
    names = sc.names()
    node = D.Var("nodeId")
    nus_self = _v("nus", "nodeId")
    clk_self = _v("clk", "nodeId")
    gate = _b("<=", _v("nus", n - 1), _two_pi())
    urgent = dict(invariant=_b("<=", clk_self, _n(0)), rates=(D.RateDef(clk_self, _n(1)),))

    sv = D.Template(
        "SV", ("nodeId", "orbitId"), (),
        (D.LocationDef("loop", initial=True, invariant=_b("<=", nus_self, _two_pi()),
                       rates=(D.RateDef(nus_self, D.Call("kepler_rate", (D.Var("orbitId"), nus_self))),)),),
        (D.EdgeDef("loop", "loop", _b(">=", nus_self, _two_pi()), D.Sync("reset", node, "!"),
                   (_asg(nus_self, _b("-", nus_self, _two_pi())),)),),
    )

    cnt, cur = D.Var("cnt"), D.Var("cur")
    last = _last_client_minus_one()
    server_edges = []
    for c in range(n):
        got = _v("got", c)
        server_edges.append(D.EdgeDef(
            "sphase1_t", "sphase1_s", _b("==", got, _n(0)), D.Sync("reset", _n(c), "?"),
            (_asg(got, _n(1)), _asg(cur, _n(c)), _asg(clk_self, _n(0)))))
    if n > 1:
        server_edges.append(D.EdgeDef("sphase1_s", "sphase1_t", _b("<", cnt, last),
                                      D.Sync("ch2client", cur, "!"), (_asg(cnt, _b("+", cnt, _n(1))),)))
    server_edges.append(D.EdgeDef("sphase1_s", "sphase2", _b("==", cnt, last),
                                  D.Sync("ch2client", cur, "!"), (_asg(cnt, _n(0)),)))
    if n > 1:
        server_edges.append(D.EdgeDef("sphase2", "sphase2", _b("<", cnt, last),
                                      D.Sync("ch2server", None, "?"), (_asg(cnt, _b("+", cnt, _n(1))),)))
    server_edges.append(D.EdgeDef("sphase2", "sphase3", _b("==", cnt, last),
                                  D.Sync("ch2server", None, "?"), (_asg(cnt, _n(0)), _asg(clk_self, _n(0)))))
    server_edges.append(D.EdgeDef("sphase3", "send", None, None, (_asg(D.Var("terminated"), _n(1)),)))
    server = D.Template(
        "FlServer", ("nodeId",),
        (D.VarDecl("int", "got", n, tuple(_n(0) for _ in range(n))),
         D.VarDecl("int", "cur", None, (_n(0),)),
         D.VarDecl("int", "cnt", None, (_n(0),))),
        (D.LocationDef("sphase1_t", initial=True, invariant=gate),
         D.LocationDef("sphase1_s", **urgent),
         D.LocationDef("sphase2"),
         D.LocationDef("sphase3", **urgent),
         D.LocationDef("send", accepting=True)),
        tuple(server_edges),
    )

    client = D.Template(
        "FlClient", ("nodeId",), (),
        (D.LocationDef("cphase1", initial=True),
         D.LocationDef("cphase2_t", invariant=gate),
         D.LocationDef("cphase2_s", **urgent),
         D.LocationDef("cend", accepting=True)),
        (D.EdgeDef("cphase1", "cphase2_t", None, D.Sync("ch2client", node, "?")),
         D.EdgeDef("cphase2_t", "cphase2_s", None, D.Sync("reset", node, "?"), (_asg(clk_self, _n(0)),)),
         D.EdgeDef("cphase2_s", "cend", None, D.Sync("ch2server", None, "!"))),
    )

    by_id = sorted(sc.spacecraft, key=lambda s: s.node_id)
    instances = [D.InstanceDecl(f"sv{s.node_id}", "SV", (_n(s.node_id), _n(s.orbit_id))) for s in by_id]
    instances.append(D.InstanceDecl("server", "FlServer", (D.Var("FLSrvId"),)))
    instances += [D.InstanceDecl(f"client{c}", "FlClient", (_n(c),)) for c in sorted(sc.client_ids)]

    return D.ModelDefs(
        orbits=tuple(D.OrbitDecl(nm, o.a, o.e, o.T) for nm, o in zip(names, sc.orbits)),
        consts=(D.ConstDecl("FLSrvId", _n(sc.server_id)), D.ConstDecl("NClients", _n(n))),
        channels=(D.ChannelDecl("reset", n), D.ChannelDecl("ch2client", n), D.ChannelDecl("ch2server")),
        variables=(
            D.VarDecl("int", "terminated", None, (_n(0),)),
            D.VarDecl("continuous", "nus", n, tuple(_anomaly_literal(s.anomaly) for s in by_id)),
            D.VarDecl("continuous", "clk", n + 1, tuple(_n(0) for _ in range(n + 1))),
        ),
        templates=(sv, server, client),
        instances=tuple(instances),
    )


def stochastic_cfl(scenario: Scenario | None = None) -> Network:
    return build_network(stochastic_defs(scenario))


# --- bundled files ------------------------------------------------------------

def bundled_path(name: str):
    """Path of a bundled model or query file such as ``cfl_stochastic.ksm``."""
    return resources.files("ksmc") / "models" / name


def bundled_text(name: str) -> str:
    return bundled_path(name).read_text(encoding="utf-8")
