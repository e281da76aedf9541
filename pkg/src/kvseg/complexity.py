"""Closed-form parameter and multiply-accumulate counts.

Counting conventions (per single input image):

* conv: ``k^2 * (C_in / groups) * C_out * H_out * W_out`` MACs
* linear: ``rows * d_in * d_out`` MACs
* attention matmuls: ``H * n^2 * d_k`` each for scores and value mixing
* normalisation, activations, softmax, pooling, upsampling, residual and
  bias additions: 0 MACs
* parameters: every learnable tensor, including norm affine terms and
  biases; batch-norm running statistics are buffers, not parameters

The walker mirrors the module tree, so each entry path names a module
subtree of the built model (``encoder.blocks.3.attn``, ...).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .attention import AttentionConfig, Variant
from .config import ModelConfig
from .encoders import TOTAL_STRIDE, Family, cvt_grids
from .errors import ConfigurationError

MODES = ("paper", "full")
CSV_HEADER = ("path", "params", "macs")


@dataclass(frozen=True)
class CostEntry:
    path: str
    params: int
    macs: int


@dataclass
class CostReport:
    name: str
    entries: list[CostEntry] = field(default_factory=list)
    convention_notes: list[str] = field(default_factory=list)
    pos_extra_macs: int = 0

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def totals(self) -> tuple[int, int]:
        return self.params, self.macs

    @property
    def corrected_macs(self) -> int:
        """MACs including the positional expansion the headline figure leaves out."""
        return self.macs + self.pos_extra_macs

    def add(self, path: str, params: int, macs: int) -> None:
        self.entries.append(CostEntry(path, int(params), int(macs)))

    def by_path(self) -> dict[str, CostEntry]:
        return {e.path: e for e in self.entries}


def attention_complexity(cfg: AttentionConfig, n: int, mode: str = "full") -> tuple[int, int]:
    """``(params, macs)`` of one self-attention layer over ``n`` tokens.

    ``paper`` mode keeps only the query/key projection terms that differ
    between variants: QKV ``(2d^2, 2nd^2)``, KV ``(d^2, nd^2)``, KV+pos
    ``(d^2 + m, nd^2 + n^2 m)``. ``full`` mode counts every projection, both
    attention matmuls (``2 n^2 d``) and, for KV+pos, the ``m + 1`` learned
    weights and ``n^2 m`` expansion MACs.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown counting mode {mode!r}")
    d = cfg.d_model
    m = cfg.pos_dim or 0
    if mode == "paper":
        if cfg.variant is Variant.QKV:
            return 2 * d * d, 2 * n * d * d
        if cfg.variant is Variant.KV:
            return d * d, n * d * d
        return d * d + m, n * d * d + n * n * m
    projections = 4 if cfg.variant is Variant.QKV else 3
    params = projections * d * d
    macs = projections * n * d * d + 2 * n * n * d
    if cfg.variant is Variant.KV_POS:
        params += m + 1
        macs += n * n * m
    return params, macs


def pos_extra_macs(n: int, m: int, layers: int) -> int:
    """MACs of projecting the ``n x n x m`` positional expansion, over ``layers`` layers."""
    return layers * n * n * m


def audit_kv_pos_extra(cfg: ModelConfig) -> int:
    """Positional-expansion MACs summed over every attention layer (0 unless KV_POS)."""
    if cfg.attention is not Variant.KV_POS:
        return 0
    m = cfg.pos_dim
    if cfg.family is Family.CVT:
        grids = cvt_grids(cfg.encoder_config())
        return sum(pos_extra_macs(g * g, m, s.depth) for s, g in zip(cfg.cvt_stages, grids))
    return pos_extra_macs(cfg.seq_len, m, cfg.layers)


def _conv(report: CostReport, path: str, c_in: int, c_out: int, k: int, out_hw: int,
          bias: bool, groups: int = 1) -> None:
    params = k * k * (c_in // groups) * c_out + (c_out if bias else 0)
    report.add(path, params, k * k * (c_in // groups) * c_out * out_hw * out_hw)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _transformer_block(report: CostReport, path: str, att: AttentionConfig, n: int, hidden: int,
                       mode: str, conv_proj: bool = False) -> None:
    d = att.d_model
    report.add(f"{path}.norm1", 2 * d, 0)
    params, macs = attention_complexity(att, n, mode)
    if att.variant is Variant.KV_POS and mode == "full":
        macs -= n * n * att.pos_dim  # reported separately, see audit_kv_pos_extra
    if conv_proj:
        branches = 3 if att.variant is Variant.QKV else 2
        params += branches * 9 * d
        macs += branches * 9 * d * n
    report.add(f"{path}.attn", params, macs)
    report.add(f"{path}.norm2", 2 * d, 0)
    report.add(f"{path}.mlp", 2 * d * hidden + hidden + d, 2 * n * d * hidden)


def _bn(report: CostReport, path: str, c: int) -> None:
    report.add(path, 2 * c, 0)


def _ce_stem(report: CostReport, cfg: ModelConfig) -> None:
    w = cfg.ce_width
    h = _conv_out(cfg.image_size, 7, 2, 3)
    _conv(report, "encoder.stem.conv1", 3, w, 7, h, bias=False)
    _bn(report, "encoder.stem.bn1", w)
    h = _conv_out(h, 3, 2, 1)
    c_in = w
    for s, (count, stride) in enumerate(zip(cfg.ce_blocks, (1, 2, 2))):
        width = w * 2**s
        c_out = 4 * width
        for b in range(count):
            st = stride if b == 0 else 1
            ho = _conv_out(h, 3, st, 1)
            p = f"encoder.stem.stages.{s}.layers.{b}"
            _conv(report, f"{p}.conv1", c_in, width, 1, h, bias=False)
            _bn(report, f"{p}.bn1", width)
            _conv(report, f"{p}.conv2", width, width, 3, ho, bias=False)
            _bn(report, f"{p}.bn2", width)
            _conv(report, f"{p}.conv3", width, c_out, 1, ho, bias=False)
            _bn(report, f"{p}.bn3", c_out)
            if st != 1 or c_in != c_out:
                _conv(report, f"{p}.downsample", c_in, c_out, 1, ho, bias=False)
                _bn(report, f"{p}.down_bn", c_out)
            c_in, h = c_out, ho


def _patch_embedding(report: CostReport, channels: int, patch: int, d: int, n: int) -> None:
    fan_in = patch * patch * channels
    report.add("encoder.embed", fan_in * d + d + n * d, n * fan_in * d)


def _decoder(report: CostReport, cfg: ModelConfig) -> None:
    dec = cfg.decoder_config()
    widths = dec.widths()
    g = dec.grid
    for s in range(dec.stages):
        for u in range(dec.convs_per_stage):
            c_in = widths[s] if u == 0 else widths[s + 1]
            _conv(report, f"decoder.stages.{s}.{u}.conv", c_in, widths[s + 1], 3, g, bias=True)
            _bn(report, f"decoder.stages.{s}.{u}.bn", widths[s + 1])
        g *= 2
    _conv(report, "decoder.classifier", widths[-1], dec.num_classes, 1, g, bias=True)


def audit_model(cfg: ModelConfig, mode: str = "full") -> CostReport:
    """Walk the architecture and tally parameters and MACs per submodule.

    KV+pos expansion MACs are not part of the entries; they are reported in
    ``pos_extra_macs`` (see :func:`audit_kv_pos_extra`).
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown counting mode {mode!r}")
    report = CostReport(cfg.name)
    report.convention_notes.append(
        f"mode={mode}; conv k^2*Cin*Cout*Ho*Wo, linear rows*din*dout, attention 2*n^2*d; "
        "norms/activations/softmax/upsampling excluded"
    )
    enc = cfg.encoder_config()
    if cfg.family is Family.CVT:
        c_in = 3
        grids = cvt_grids(enc)
        for i, (s, g) in enumerate(zip(cfg.cvt_stages, grids)):
            p = f"encoder.stages.{i}"
            _conv(report, f"{p}.embed", c_in, s.d_model, s.embed_kernel, g, bias=True)
            report.add(f"{p}.embed_norm", 2 * s.d_model, 0)
            att = enc.attention(s.d_model, s.heads)
            hidden = int(round(cfg.mlp_ratio * s.d_model))
            for b in range(s.depth):
                _transformer_block(report, f"{p}.blocks.{b}", att, g * g, hidden, mode, conv_proj=True)
            c_in = s.d_model
        report.add("encoder.norm", 2 * c_in, 0)
    else:
        n, d = cfg.seq_len, cfg.d_model
        if cfg.family is Family.CE:
            if cfg.image_size % TOTAL_STRIDE:
                raise ConfigurationError("CE image size must be divisible by 16")
            _ce_stem(report, cfg)
            _patch_embedding(report, 16 * cfg.ce_width, 1, d, n)
        else:
            _patch_embedding(report, 3, cfg.patch_size, d, n)
        att = enc.attention()
        for b in range(cfg.layers):
            _transformer_block(report, f"encoder.blocks.{b}", att, n, enc.hidden, mode)
        report.add("encoder.norm", 2 * d, 0)
    _decoder(report, cfg)
    report.pos_extra_macs = audit_kv_pos_extra(cfg)
    if report.pos_extra_macs:
        report.convention_notes.append(
            f"positional expansion not included above: +{report.pos_extra_macs:,} MACs "
            f"(corrected total {report.corrected_macs:,})"
        )
    return report


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _group(path: str, depth: int) -> str:
    return ".".join(path.split(".")[:depth])


def summarize(report: CostReport, depth: int = 3) -> list[CostEntry]:
    """Collapse entries to the first ``depth`` path components, order preserved."""
    rows: dict[str, list[int]] = {}
    for e in report.entries:
        acc = rows.setdefault(_group(e.path, depth), [0, 0])
        acc[0] += e.params
        acc[1] += e.macs
    return [CostEntry(k, p, m) for k, (p, m) in rows.items()]


def _rows(report: CostReport, other: CostReport | None, depth: int) -> tuple[list[str], list[list]]:
    a = summarize(report, depth)
    if other is None:
        rows = [[e.path, e.params, e.macs] for e in a]
        rows.append(["total", report.params, report.macs])
        return list(CSV_HEADER), rows
    b = {e.path: e for e in summarize(other, depth)}
    paths = [e.path for e in a] + [p for p in b if p not in {e.path for e in a}]
    amap = {e.path: e for e in a}
    rows = []
    for p in paths:
        ea, eb = amap.get(p), b.get(p)
        pa, ma = (ea.params, ea.macs) if ea else (0, 0)
        pb, mb = (eb.params, eb.macs) if eb else (0, 0)
        rows.append([p, pa, ma, pb, mb, pa - pb, ma - mb])
    rows.append(["total", report.params, report.macs, other.params, other.macs,
                 report.params - other.params, report.macs - other.macs])
    header = ["path", f"params[{report.name}]", f"macs[{report.name}]",
              f"params[{other.name}]", f"macs[{other.name}]", "delta_params", "delta_macs"]
    return header, rows


def to_csv(report: CostReport, other: CostReport | None = None, depth: int = 3) -> str:
    """CSV with header ``path,params,macs`` (or the paired/delta header for two reports)."""
    header, rows = _rows(report, other, depth)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def to_table(report: CostReport, other: CostReport | None = None, depth: int = 3) -> str:
    header, rows = _rows(report, other, depth)
    cells = [header] + [[r[0]] + [f"{v:,}" for v in r[1:]] for r in rows]
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        first = str(row[0]).ljust(widths[0])
        rest = [str(v).rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join([first] + rest))
        if i == 0 or i == len(cells) - 2:
            lines.append("-" * len(lines[-1]))
    reports = [report] if other is None else [report, other]
    for r in reports:
        lines.append(f"{r.name}: {r.params / 1e6:.2f} M params, {r.macs / 1e9:.2f} G MACs")
        if r.pos_extra_macs:
            lines.append(
                f"* {r.name} MACs exclude the 2D positional encoding: +{r.pos_extra_macs:,} MACs "
                f"-> {r.corrected_macs / 1e9:.4f} G corrected"
            )
    if other is not None:
        dp, dm = report.params - other.params, report.macs - other.macs
        lines.append(f"delta {report.name} - {other.name}: {dp:+,} params ({dp / 1e6:+.2f} M), "
                     f"{dm:+,} MACs ({dm / 1e9:+.2f} G)")
    return "\n".join(lines)
