"""Stochastic computational latency at edge machines.

Execution times are discrete pmfs over processing time steps (step 1, 2, ...).
A task's completion time in a batch queue is the convolution of its own
execution pmf with those of all tasks ahead of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import ConfigError, ScenarioConfig


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass(frozen=True)
class ExecutionPmf:
    """Pmf over time steps 1..len(probs); probs[i] is the mass at step i+1."""

    probs: np.ndarray
    step_ms: float = 1.0

    def __post_init__(self) -> None:
        if self.probs.ndim != 1 or self.probs.size < 1:
            raise ValueError("pmf needs at least one step")
        if np.any(self.probs < -1e-12):
            raise ValueError("pmf entries must be nonnegative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("pmf must sum to 1 within 1e-9")

    @property
    def max_step(self) -> int:
        return int(self.probs.size)

    def mean_steps(self) -> float:
        steps = np.arange(1, self.probs.size + 1)
        return float((steps * self.probs).sum())

    def mean_ms(self) -> float:
        return self.mean_steps() * self.step_ms

    def truncated_mean_steps(self, t_max: int) -> float:
        """Sum of t * P(t) for t <= t_max; mass beyond t_max contributes nothing."""
        hi = min(int(t_max), self.probs.size)
        if hi <= 0:
            return 0.0
        steps = np.arange(1, hi + 1)
        return float((steps * self.probs[:hi]).sum())


@dataclass(frozen=True)
class MachineQueue:
    """Batch of tasks at one SBS's machine, in service order; one entry per AV."""

    machine_id: int
    entries: tuple[tuple[int, int], ...] = field(default_factory=tuple)  # (av, task_id)

    def __post_init__(self) -> None:
        avs = [av for av, _ in self.entries]
        if len(set(avs)) != len(avs):
            raise ValueError("an AV may appear at most once in a queue")

    def position(self, av: int) -> int:
        for i, (a, _) in enumerate(self.entries):
            if a == av:
                return i
        raise KeyError(f"AV {av} is not in the queue")


def discretize_gaussian(
    mean_steps: float, std_steps: float, max_steps: int, step_ms: float = 1.0
) -> ExecutionPmf:
    """Bin a Gaussian into unit steps 1..max_steps with half-step bin edges.

    Mass falling below step 1 or above max_steps is folded back by renormalizing,
    keeping a proper pmf on the truncated support.
    """
    if mean_steps <= 0 or std_steps <= 0:
        raise ConfigError("mean_steps and std_steps must be > 0")
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    edges = np.arange(0, max_steps + 1) + 0.5  # bin t covers (t-0.5, t+0.5]
    z = (edges - mean_steps) / std_steps
    cdf = np.array([_norm_cdf(v) for v in z])
    probs = np.diff(cdf)
    total = float(probs.sum())
    if total < 1e-300:
        # Degenerate truncation (mean far outside the support): all mass at the
        # nearest admissible step.
        probs = np.zeros(max_steps)
        probs[0 if mean_steps < 1 else max_steps - 1] = 1.0
    else:
        probs = probs / total
    return ExecutionPmf(probs=probs, step_ms=step_ms)


def convolve(a: ExecutionPmf, b: ExecutionPmf, max_len: int | None = None) -> ExecutionPmf:
    """Distribution of the sum of two independent step counts.

    Completing a then b at steps (i, j) contributes mass a[i]*b[j] at step i+j,
    so the result's support starts at 2. If max_len is given the support is
    truncated there and renormalized so the result remains a valid pmf.
    """
    if a.step_ms != b.step_ms:
        raise ValueError("cannot convolve pmfs with different step durations")
    summed = np.convolve(a.probs, b.probs)
    probs = np.concatenate([[0.0], summed])  # index 0 is step 1, which has no mass
    if max_len is not None and probs.size > max_len:
        probs = probs[:max_len]
        total = float(probs.sum())
        if total <= 0:
            raise ValueError("truncation removed all probability mass")
        probs = probs / total
    return ExecutionPmf(probs=probs, step_ms=a.step_ms)


def execution_pmf(config: ScenarioConfig, machine_id: int, task_id: int) -> ExecutionPmf:
    """Execution-time pmf of one task type on one machine type."""
    machine = config.machine_by_id(machine_id)
    task = config.task_by_id(task_id)
    mean, std = machine.exec_stats[task_id]
    return discretize_gaussian(mean, std, task.max_steps, step_ms=config.time_step_ms)


def completion_pmf(config: ScenarioConfig, queue: MachineQueue, target_av: int) -> ExecutionPmf:
    """Pmf of the completion step of target_av: its own execution plus everything ahead."""
    pos = queue.position(target_av)
    pmf = execution_pmf(config, queue.machine_id, queue.entries[0][1])
    for _, task_id in queue.entries[1 : pos + 1]:
        pmf = convolve(pmf, execution_pmf(config, queue.machine_id, task_id))
    return pmf


def expected_task_completion_ms(
    config: ScenarioConfig, queue: MachineQueue, target_av: int
) -> float:
    """Mean completion time of one queued task, in milliseconds."""
    return completion_pmf(config, queue, target_av).mean_ms()


def expected_completion_ms(config: ScenarioConfig, queue: MachineQueue) -> float:
    """Expected batch completion: sum over queued tasks of their expected completion.

    Each task's expectation is truncated at its own drop threshold, so work that
    would be dropped anyway does not count toward the batch total.
    """
    total = 0.0
    for av, task_id in queue.entries:
        pmf = completion_pmf(config, queue, av)
        t_max = config.task_by_id(task_id).max_steps
        total += pmf.truncated_mean_steps(t_max) * config.time_step_ms
    return total


@dataclass(frozen=True)
class CompletionSample:
    steps: int
    dropped: bool


def sample_completion_steps(
    config: ScenarioConfig, queue: MachineQueue, rng: np.random.Generator
) -> dict[int, CompletionSample]:
    """One realization of the queue: independent execution draws, cumulative completions.

    A task whose realized completion exceeds its own max_steps is flagged dropped.
    """
    out: dict[int, CompletionSample] = {}
    elapsed = 0
    for av, task_id in queue.entries:
        pmf = execution_pmf(config, queue.machine_id, task_id)
        step = int(rng.choice(pmf.max_step, p=pmf.probs)) + 1
        elapsed += step
        dropped = elapsed > config.task_by_id(task_id).max_steps
        out[av] = CompletionSample(steps=elapsed, dropped=dropped)
    return out


def queue_of(
    config: ScenarioConfig, machine_id: int, tasks: Iterable[tuple[int, int]]
) -> MachineQueue:
    return MachineQueue(machine_id=machine_id, entries=tuple(tasks))
