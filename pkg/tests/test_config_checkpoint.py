import struct

import numpy as np
import pytest
import torch

from corrprune import checkpoint as ck
from corrprune import network as nw
from corrprune import training as tr
from corrprune.config import ConfigError, KEYS, format_config, parse_config, resolve


class TestConfig:
    def test_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path)
        n = cfg.network
        assert (n.d, n.L, n.H, n.po, n.prune_rate, n.num_modules) == (128, 5, 4, 2, 0.5, 2)
        assert cfg.loss.beta == 0.5 and cfg.schedule.base == 1e-3 and cfg.run.batch_size == 32

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("d = 64  # channels\n\nL = 3\n")
        cfg = parse_config(path, ["d=32"])
        assert cfg.network.d == 32 and cfg.network.L == 3

    def test_invariant_error_has_line(self):
        with pytest.raises(ConfigError) as exc:
            resolve("d = 30\nH = 4\n")
        assert exc.value.line == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            resolve("d = 32\nwidth = 3\n")
        assert exc.value.line == 2
        with pytest.raises(ConfigError):
            resolve("", ["width=3"])

    def test_type_error(self):
        with pytest.raises(ConfigError) as exc:
            resolve("\nL = three\n")
        assert exc.value.line == 2

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            resolve("just words\n")

    def test_echo_reparses_identically(self):
        cfg = resolve("d = 48\nH = 6\nlr = 0.0025\nblock_variant = vanilla\nout = x.bin\n")
        assert resolve(format_config(cfg)) == cfg

    def test_every_key_is_settable(self):
        cfg = resolve(format_config(resolve()))
        assert len(format_config(cfg).splitlines()) == len(KEYS)


def tiny_cfg(**kw):
    return resolve("", {"d": 8, "L": 2, "H": 2, "po": 1, **kw})


def trained_checkpoint(iterations=2):
    from corrprune import synthdata as sd

    cfg = tiny_cfg()
    pairs = sd.generate_dataset(sd.DatasetSpec(num_pairs=4, n=48, seed=2))
    res = tr.train(pairs, cfg.network, cfg.loss, tr.LrSchedule(warmup=2), iterations=iterations, batch_size=2)
    return cfg, ck.make_checkpoint(cfg, res.model, res.state, res.iteration)


class TestCheckpoint:
    def test_fresh_roundtrip_bytewise(self, tmp_path):
        cfg = tiny_cfg()
        ckpt = ck.make_checkpoint(cfg, nw.build_model(cfg.network, 0))
        ck.save_checkpoint(tmp_path / "a.ck", ckpt)
        ck.save_checkpoint(tmp_path / "b.ck", ck.load_checkpoint(tmp_path / "a.ck"))
        model, _, _ = ck.restore(ck.load_checkpoint(tmp_path / "b.ck"))
        ck.save_checkpoint(tmp_path / "c.ck", ck.make_checkpoint(cfg, model))
        a, b, c = ((tmp_path / f).read_bytes() for f in ("a.ck", "b.ck", "c.ck"))
        assert a == b == c
        assert not list(tmp_path.glob("*.tmp"))

    def test_restore_preserves_state(self):
        cfg, ckpt = trained_checkpoint()
        model, state, it = ck.restore(ckpt)
        assert it == 2 and state.step == 2
        again = ck.make_checkpoint(cfg, model, state, it)
        assert ck.checkpoint_bytes(again) == ck.checkpoint_bytes(ckpt)
        assert ckpt.config == cfg

    def test_header_layout(self):
        cfg = tiny_cfg()
        buf = ck.checkpoint_bytes(ck.make_checkpoint(cfg, nw.build_model(cfg.network)))
        assert buf[:8] == b"CPCK0001"
        (n,) = struct.unpack_from("<I", buf, 8)
        assert buf[12:12 + n].decode() == format_config(cfg)

    def test_shape_mismatch_names_tensor(self):
        _, ckpt = trained_checkpoint(0)
        with pytest.raises(ck.ShapeMismatchError, match="param.stages.0"):
            ck.restore(ckpt, tiny_cfg(d=16, H=2))

    def test_bad_magic_and_version(self):
        cfg = tiny_cfg()
        buf = ck.checkpoint_bytes(ck.make_checkpoint(cfg, nw.build_model(cfg.network)))
        with pytest.raises(ck.BadMagicError):
            ck.parse_checkpoint(b"XXXX" + buf[4:])
        with pytest.raises(ck.VersionMismatchError):
            ck.parse_checkpoint(buf[:4] + b"0002" + buf[8:])
        with pytest.raises(ck.BadMagicError):
            ck.parse_checkpoint(b"")

    def test_truncation_every_prefix(self):
        cfg = tiny_cfg(num_modules=1)
        buf = ck.checkpoint_bytes(ck.make_checkpoint(cfg, nw.build_model(cfg.network)))
        for cut in range(8, len(buf), max(1, len(buf) // 200)):
            with pytest.raises(ck.CheckpointError):
                ck.parse_checkpoint(buf[:cut])

    def test_trailing_bytes(self):
        cfg = tiny_cfg()
        buf = ck.checkpoint_bytes(ck.make_checkpoint(cfg, nw.build_model(cfg.network)))
        with pytest.raises(ck.CheckpointError):
            ck.parse_checkpoint(buf + b"\0")

    def test_failed_load_leaves_file_untouched(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "m.ck"
        ck.save_checkpoint(path, ck.make_checkpoint(cfg, nw.build_model(cfg.network, 1)))
        before = path.read_bytes()
        path.write_bytes(before[:-10])
        with pytest.raises(ck.TruncationError):
            ck.load_checkpoint(path)

    def test_missing_tensor(self):
        _, ckpt = trained_checkpoint(0)
        name = next(k for k in ckpt.tensors if k.startswith("param."))
        del ckpt.tensors[name]
        with pytest.raises(ck.ShapeMismatchError, match=name):
            ck.restore(ckpt)

    def test_buffers_saved(self):
        _, ckpt = trained_checkpoint()
        bufs = [k for k in ckpt.tensors if k.startswith("buffer.")]
        assert any("running_mean" in k for k in bufs)
        assert not np.all(ckpt.tensors[bufs[0]] == 0) or not np.all(ckpt.tensors[bufs[-1]] == 1)
