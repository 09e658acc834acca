"""The black-box source model.

Everything outside this package sees the teacher only through an endpoint's
``predict(features) -> C x H x W probabilities``; the generative parameters
behind the in-process endpoint are never exposed.
"""
from dataclasses import dataclass

from .bayes import bayes_posterior
from .protocol import (
    MalformedResponse,
    RemoteClient,
    RemoteError,
    SimplexViolation,
    TeacherError,
    TeacherServer,
    TeacherTimeout,
    serve_teacher,
)

__all__ = [
    "EndpointDescriptor",
    "InProcessTeacher",
    "MalformedResponse",
    "RemoteError",
    "RemoteTeacher",
    "SimplexViolation",
    "TeacherError",
    "TeacherServer",
    "TeacherTimeout",
    "bayes_posterior",
    "connect",
    "predict",
    "serve_teacher",
]


@dataclass(frozen=True)
class EndpointDescriptor:
    kind: str = "in-process"
    host: str = "127.0.0.1"
    port: int = 0
    timeout_ms: int = 10_000

    def __post_init__(self):
        if self.kind not in ("in-process", "remote"):
            raise ValueError(f"unknown endpoint kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")

    def to_dict(self):
        if self.kind == "in-process":
            return {"kind": self.kind}
        return {"kind": self.kind, "host": self.host, "port": self.port, "timeout_ms": self.timeout_ms}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class InProcessTeacher:
    kind = "in-process"

    def __init__(self, source_spec):
        self.__spec = source_spec

    def predict(self, features):
        return bayes_posterior(features, self.__spec)

    def close(self):
        pass

    def __repr__(self):
        return "InProcessTeacher()"


class RemoteTeacher:
    kind = "remote"

    def __init__(self, host, port, timeout_ms=10_000):
        self._client = RemoteClient(host, port, timeout_ms)

    def predict(self, features):
        return self._client.request(features)

    def close(self):
        self._client.close()

    def __repr__(self):
        return f"RemoteTeacher({self._client.host}:{self._client.port})"


def connect(descriptor, source_spec=None):
    """Build an endpoint. ``source_spec`` is only consumed by the in-process kind."""
    if descriptor.kind == "remote":
        return RemoteTeacher(descriptor.host, descriptor.port, descriptor.timeout_ms)
    if source_spec is None:
        raise ValueError("an in-process teacher needs the source domain spec")
    return InProcessTeacher(source_spec)


def predict(endpoint, features):
    return endpoint.predict(features)
