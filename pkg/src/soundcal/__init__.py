"""Loudspeaker and microphone calibration with nonsynchronous MLS measurement."""

from .correction import (FlatnessReport, InverseImpulseResponse, apply_correction, assess_flatness,
                         bandlimit_filtered_mls, inverse_ir, inverse_spectrum)
from .drc_model import DrcFit, DrcParams, GainPoint, drc_out, fit_drc
from .mls_analysis import (ImpulseResponse, PlaybackLayout, estimate_period, impulse_response,
                           resample_to_period, schroeder_curve, truncate_ir)
from .profile_library import DeviceIdentity, NoMatch, Profile, ProfileStore, TraceChain
from .session import SessionConfig, SessionReport, run_calibration_session
from .signals import FrequencyResponse, MlsSpec, SampledSignal, generate_mls
from .sim_chain import PlaybackChain, SimEnvironment, SimTransducer, simulate_playback

__version__ = "0.1.0"
