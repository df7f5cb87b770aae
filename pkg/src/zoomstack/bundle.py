"""A trained model set stored as one named-tensor checkpoint archive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cdm import CdmNet
from .codec import Codec, codec_from_state, codec_meta
from .denoiser import DenoiserNet
from .numerics.io import load_checkpoint, save_checkpoint
from .pyramid import Normalization
from .summarizer import SummarizerNet


@dataclass
class ModelBundle:
    codec: Codec
    summarizer: SummarizerNet | None = None
    denoiser: DenoiserNet | None = None
    cdm: CdmNet | None = None
    normalization: Normalization | None = None
    meta: dict | None = None

    def state(self) -> dict:
        out = dict(self.codec.state_dict("codec/"))
        if self.summarizer is not None:
            out.update(self.summarizer.state_dict("summarizer/"))
        if self.denoiser is not None:
            out.update(self.denoiser.state_dict("denoiser/"))
        if self.cdm is not None:
            out.update(self.cdm.state_dict("cdm/"))
        if self.normalization is not None:
            out["norm/mean"] = self.normalization.mean
            out["norm/std"] = self.normalization.std
        return out

    def save(self, path) -> None:
        meta = dict(self.meta or {})
        meta.update(codec_meta(self.codec))
        meta["parts"] = [p for p in ("summarizer", "denoiser", "cdm") if getattr(self, p) is not None]
        save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        state, meta = load_checkpoint(path)
        codec = codec_from_state(state, meta)
        arch = meta.get("arch", {})
        parts = set(meta.get("parts", []))
        summ = den = cdm = None
        if "summarizer" in parts:
            summ = SummarizerNet(**arch.get("summarizer", {}))
            summ.load_state_dict(state, "summarizer/")
        if "denoiser" in parts:
            kw = dict(arch.get("denoiser", {}))
            if "channels" in kw:
                kw["channels"] = tuple(kw["channels"])
            den = DenoiserNet(**kw)
            den.load_state_dict(state, "denoiser/")
        if "cdm" in parts:
            cdm = CdmNet(**arch.get("cdm", {}))
            cdm.load_state_dict(state, "cdm/")
        norm = None
        if "norm/mean" in state:
            norm = Normalization(np.array(state["norm/mean"]), np.array(state["norm/std"]))
        return cls(codec, summ, den, cdm, norm, meta)
