"""Signal-attenuation diffusion for low-light image restoration."""

from .schedule import NoiseSchedule, ScheduleConfig, build_schedule

__all__ = ["NoiseSchedule", "ScheduleConfig", "build_schedule"]
__version__ = "0.1.0"
