"""Minimum-jerk quintic profiles for lateral lane-change motion.

The closed form d(tau) = d0 + (d1 - d0) * (10 tau^3 - 15 tau^4 + 6 tau^5)
has zero velocity and zero acceleration at both ends, so a maneuver can be
spliced into lane-keeping without a kink. Both the ego controller and the
surrounding-traffic manager draw their lateral motion from it.
"""

from __future__ import annotations

from dataclasses import dataclass

LANE_CHANGE_DURATION = 5.5  # s; keeps peak lateral speed below 1.3 m/s for a 3.5 m hop


@dataclass(frozen=True)
class TrajectoryPlan:
    """One lateral maneuver: start/end offsets in road coordinates."""

    start_lateral: float
    end_lateral: float
    duration: float
    start_time: float
    coefficients: tuple[float, float, float, float, float, float]

    def position(self, t: float) -> float:
        """Lateral offset at absolute time t (clamped to the plan window)."""
        tau = _clamped_tau(t - self.start_time, self.duration)
        c = self.coefficients
        return c[0] + tau * (c[1] + tau * (c[2] + tau * (c[3] + tau * (c[4] + tau * c[5]))))

    def velocity(self, t: float) -> float:
        """Lateral speed at absolute time t; identically 0 outside the window."""
        rel = t - self.start_time
        if rel < 0.0 or rel > self.duration:
            return 0.0
        tau = rel / self.duration
        c = self.coefficients
        dd_dtau = c[1] + tau * (2 * c[2] + tau * (3 * c[3] + tau * (4 * c[4] + tau * 5 * c[5])))
        return dd_dtau / self.duration

    def done(self, t: float) -> bool:
        return t - self.start_time >= self.duration - 1e-9


def plan_quintic(d0: float, d1: float, duration: float, start_time: float = 0.0) -> TrajectoryPlan:
    """Build the minimum-jerk profile from lateral d0 to d1 over `duration` seconds.

    Boundary conditions: d(0)=d0, d(T)=d1, d'(0)=d'(T)=0, d''(0)=d''(T)=0.
    The peak lateral speed is 15*(d1-d0)/(8*T) at the midpoint.
    """
    if duration <= 0.0:
        raise ValueError(f"plan duration must be positive, got {duration}")
    delta = d1 - d0
    # d(tau) in powers of tau = t/T: d0 + delta*(10 tau^3 - 15 tau^4 + 6 tau^5)
    coefficients = (d0, 0.0, 0.0, 10.0 * delta, -15.0 * delta, 6.0 * delta)
    return TrajectoryPlan(
        start_lateral=d0,
        end_lateral=d1,
        duration=duration,
        start_time=start_time,
        coefficients=coefficients,
    )


def peak_lateral_speed(delta: float, duration: float) -> float:
    """Closed-form maximum |d'| of the quintic profile (at tau = 0.5)."""
    return abs(15.0 * delta / (8.0 * duration))


def _clamped_tau(rel: float, duration: float) -> float:
    if rel <= 0.0:
        return 0.0
    if rel >= duration:
        return 1.0
    return rel / duration
