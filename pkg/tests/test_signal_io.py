"""EDF parsing/writing, annotation sidecars, consensus and synthetic recordings."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neoseize.errors import ConfigError, ParseError
from neoseize.signal_io import (
    AnnotationSet,
    Recording,
    SeizureInterval,
    SynthConfig,
    annotations_from_masks,
    consensus_intervals,
    format_annotations,
    parse_edf,
    quantization_step,
    read_annotations,
    synth_record,
    write_edf,
)


def hand_edf(labels, digital, n_records, spr, phys=(-100.0, 100.0), dig=(-32768, 32767),
             record_duration=1):
    """Build EDF bytes field by field, independent of ``write_edf``."""
    ns = len(labels)

    def f(v, w):
        return str(v).ljust(w)[:w].encode("ascii")

    head = (f("0", 8) + f("patient", 80) + f("recording", 80) + f("01.01.20", 8)
            + f("00.00.00", 8) + f(256 * (ns + 1), 8) + f("", 44) + f(n_records, 8)
            + f(record_duration, 8) + f(ns, 4))
    cols = [
        [f(lab, 16) for lab in labels], [f("AgAgCl", 80)] * ns, [f("uV", 8)] * ns,
        [f(phys[0], 8)] * ns, [f(phys[1], 8)] * ns, [f(dig[0], 8)] * ns, [f(dig[1], 8)] * ns,
        [f("", 80)] * ns, [f(spr, 8)] * ns, [f("", 32)] * ns,
    ]
    for c in cols:
        head += b"".join(c)
    body = b""
    for r in range(n_records):
        for s in range(ns):
            body += np.asarray(digital[s][r * spr:(r + 1) * spr], dtype="<i2").tobytes()
    return head + body


class TestParseEdf:
    def test_header_arithmetic(self):
        rng = np.random.default_rng(0)
        dig = rng.integers(-32768, 32768, size=(2, 2560))
        rec = parse_edf(hand_edf(["Fp1", "T3"], dig, 10, 256))
        assert rec.fs == 256
        assert rec.data.shape == (2, 2560)
        assert rec.electrodes == ["Fp1", "T3"]

    def test_scaling_formula(self):
        dig = np.array([[-32768, 0, 32767, 1000]])
        rec = parse_edf(hand_edf(["Cz"], dig, 1, 4, phys=(-200.0, 300.0)))
        expect = (dig[0] + 32768) * 500.0 / 65535 - 200.0
        np.testing.assert_allclose(rec.data[0], expect, rtol=0, atol=1e-12)
        assert rec.data[0, 0] == -200.0  # digMin -> physMin

    def test_labels_trimmed(self):
        rec = parse_edf(hand_edf(["  Fp2 "], np.zeros((1, 4)), 1, 4))
        assert rec.electrodes == ["Fp2"]

    def test_equal_digital_range_rejected(self):
        with pytest.raises(ParseError):
            parse_edf(hand_edf(["Cz"], np.zeros((1, 4)), 1, 4, dig=(0, 0)))

    def test_mismatched_samples_per_record_rejected(self):
        data = hand_edf(["A", "B"], np.zeros((2, 8)), 1, 4)
        # rewrite the second signal's samples-per-record field
        ns = 2
        off = 256 + ns * (16 + 80 + 8 + 8 + 8 + 8 + 8 + 80) + 8
        data = data[:off] + b"8       " + data[off + 8:]
        with pytest.raises(ParseError):
            parse_edf(data)

    def test_malformed_header(self):
        with pytest.raises(ParseError):
            parse_edf(b"not an edf file")
        bad = bytearray(hand_edf(["Cz"], np.zeros((1, 4)), 1, 4))
        bad[252:256] = b"xx  "
        with pytest.raises(ParseError):
            parse_edf(bytes(bad))

    def test_truncated_record_dropped_with_warning(self):
        data = hand_edf(["Cz"], np.arange(12).reshape(1, 12), 3, 4)
        with pytest.warns(UserWarning):
            rec = parse_edf(data[:-3])
        assert rec.n_samples == 8


class TestWriteEdf:
    def test_round_trip_within_one_step(self):
        rec, _ = synth_record(SynthConfig(duration_s=20, seed=3))
        raw = write_edf(rec)
        back = parse_edf(raw)
        step = quantization_step(raw)
        assert back.electrodes == rec.electrodes
        assert np.all(np.abs(back.data - rec.data) <= step[:, None] * (1 + 1e-9))

    def test_hand_parser_agrees(self):
        rec = Recording("x", 4, ["A"], np.array([[0.0, 1.5, -2.25, 3.0]]))
        back = parse_edf(write_edf(rec))
        np.testing.assert_allclose(back.data, rec.data, atol=quantization_step(write_edf(rec))[0])


class TestRecording:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Recording("x", 0, ["A"], np.zeros((1, 4)))
        with pytest.raises(ValueError):
            Recording("x", 4, ["A", "A"], np.zeros((2, 4)))
        with pytest.raises(ValueError):
            Recording("x", 4, ["A"], np.array([[0.0, np.nan, 0, 0]]))


class TestAnnotations:
    def test_csv_round_trip(self):
        ann = AnnotationSet({"A": [SeizureInterval(1.0, 2.5)], "B": [], "C": [
            SeizureInterval(0.5, 1.0), SeizureInterval(3.0, 4.0)]})
        back = read_annotations(format_annotations(ann))
        assert back.experts == ann.experts

    def test_header_required(self):
        with pytest.raises(ParseError):
            read_annotations("who,start,end\nA,1,2\n")

    def test_overlap_within_expert_rejected(self):
        with pytest.raises(ParseError):
            read_annotations("expert,onset_s,offset_s\nA,1,5\nA,4,6\n")


def mask_consensus(masks, min_len):
    """Per-second AND of the three masks, split into runs of at least ``min_len``."""
    both = np.logical_and.reduce([np.asarray(m, bool) for m in masks])
    padded = np.r_[False, both, False].astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(float(a), float(b)) for a, b in zip(edges[::2], edges[1::2]) if b - a >= min_len]


class TestConsensus:
    def test_three_expert_example(self):
        ann = AnnotationSet({"A": [SeizureInterval(10, 60)], "B": [SeizureInterval(12, 58)],
                             "C": [SeizureInterval(15, 70)]})
        assert consensus_intervals(ann) == [SeizureInterval(15, 58)]

    def test_disjoint_gives_nothing(self):
        ann = AnnotationSet({"A": [SeizureInterval(0, 20)], "B": [SeizureInterval(30, 50)],
                             "C": [SeizureInterval(60, 80)]})
        assert consensus_intervals(ann) == []

    def test_empty_expert(self):
        ann = AnnotationSet({"A": [SeizureInterval(0, 20)], "B": [], "C": [SeizureInterval(0, 20)]})
        assert consensus_intervals(ann) == []

    def test_wrong_expert_count(self):
        with pytest.raises(ConfigError):
            consensus_intervals(AnnotationSet({"A": [], "B": []}))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_per_second_mask(self, seed):
        rng = np.random.default_rng(seed)
        masks = {}
        for name in "ABC":
            m = np.zeros(300, dtype=np.int8)
            for _ in range(rng.integers(0, 5)):
                a = rng.integers(0, 280)
                m[a:a + rng.integers(1, 60)] = 1
            masks[name] = m
        ann = annotations_from_masks(masks)
        got = [(iv.onset_s, iv.offset_s) for iv in consensus_intervals(ann, 10.0)]
        assert got == mask_consensus(masks.values(), 10)
        # subset of every expert's union
        for iv in got:
            for m in masks.values():
                assert m[int(iv[0]):int(iv[1])].all()


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(duration_s=30, seed=7, seizure_intervals=((10, 20),))
        a, ann_a = synth_record(cfg)
        b, ann_b = synth_record(cfg)
        np.testing.assert_array_equal(a.data, b.data)
        assert ann_a.experts == ann_b.experts

    def test_no_seizures_no_annotations(self):
        _, ann = synth_record(SynthConfig(duration_s=10))
        assert ann.is_empty()

    def test_seizure_rms_ratio(self):
        rec, ann = synth_record(SynthConfig(duration_s=120, seed=1, seizure_intervals=((40, 80),)))
        eeg = [i for i, lab in enumerate(rec.electrodes) if lab != "ECG"]
        x = rec.data[eeg]
        inside = np.zeros(rec.n_samples, bool)
        inside[40 * rec.fs:80 * rec.fs] = True
        ratio = np.sqrt(np.mean(x[:, inside] ** 2) / np.mean(x[:, ~inside] ** 2))
        assert ratio >= 3
        cons = consensus_intervals(ann)
        assert len(cons) == 1 and cons[0].onset_s <= 40 and cons[0].offset_s >= 80

    def test_interval_outside_rejected(self):
        with pytest.raises(ConfigError):
            synth_record(SynthConfig(duration_s=10, seizure_intervals=((5, 20),)))
