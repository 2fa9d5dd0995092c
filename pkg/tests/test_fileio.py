import json
import struct
import wave

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointflow.errors import DomainError, FormatError
from jointflow.fileio import (
    decode_ppm,
    decode_tensor,
    encode_ppm,
    encode_tensor,
    frame_name,
    quantize_pcm16,
    read_frames,
    read_media,
    read_split,
    read_tensor,
    read_wav,
    write_frames,
    write_media,
    write_split,
    write_tensor,
    write_wav,
)
from jointflow.synth import SceneParams, generate_sample, make_split


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64, torch.int64, torch.uint8])
def test_tensor_round_trip(tmp_path, dtype):
    t = (torch.randn(3, 4, 5) * 50).to(dtype)
    write_tensor(t, tmp_path / "t.bin")
    back = read_tensor(tmp_path / "t.bin")
    assert back.dtype == dtype and torch.equal(back, t)
    scalar, end = decode_tensor(encode_tensor(torch.tensor(2.5)))
    assert scalar.shape == () and scalar.item() == 2.5


def test_tensor_header_layout():
    buf = encode_tensor(torch.zeros(2, 3))
    assert buf[:4] == b"SYTF" and struct.unpack_from("<HHIIB", buf, 4) == (1, 2, 2, 3, 0)
    assert len(buf) == 4 + 4 + 8 + 1 + 24


def test_tensor_format_errors(tmp_path):
    buf = encode_tensor(torch.zeros(2, 3))
    cases = [b"XXXX" + buf[4:], buf[:4] + struct.pack("<H", 7) + buf[6:], buf[:16] + b"\x09" + buf[17:], buf[:-1], buf[:6]]
    for bad in cases:
        with pytest.raises(FormatError):
            decode_tensor(bad)
    (tmp_path / "x.bin").write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(tmp_path / "x.bin")
    with pytest.raises(FormatError):
        encode_tensor(torch.zeros(2, dtype=torch.complex64))


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200))
def test_pcm_quantization_error_bound(values):
    y = np.asarray(values)
    q = quantize_pcm16(y)
    assert np.abs(q / 32767 - y).max() <= 0.5 / 32767 + 1e-12


def test_pcm_rejects_out_of_range():
    for bad in ([1.5], [-1.01], [float("nan")]):
        with pytest.raises(DomainError):
            quantize_pcm16(np.asarray(bad))


def test_wav_round_trip_and_layout(tmp_path):
    y = torch.sin(torch.linspace(0, 100, 16000)) * 0.9
    write_wav(y, tmp_path / "a.wav")
    with wave.open(str(tmp_path / "a.wav")) as w:
        assert (w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()) == (1, 2, 8000, 16000)
    raw = (tmp_path / "a.wav").read_bytes()
    assert raw[36:40] == b"data" and struct.unpack_from("<I", raw, 40)[0] == 32000
    back = read_wav(tmp_path / "a.wav", expected_rate=8000)
    assert (back - y).abs().max() <= 1 / 32767
    write_wav(torch.zeros(100), tmp_path / "z.wav")
    assert torch.equal(read_wav(tmp_path / "z.wav"), torch.zeros(100))
    with pytest.raises(FormatError):
        read_wav(tmp_path / "a.wav", expected_rate=16000)
    (tmp_path / "bad.wav").write_bytes(b"RIFF1234WAVE")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "bad.wav")


def test_ppm_round_trip_bound():
    f = torch.rand(3, 5, 7)
    buf = encode_ppm(f)
    assert buf.startswith(b"P6\n7 5\n255\n")
    assert (decode_ppm(buf) - f).abs().max() <= 0.5 / 255 + 1e-7
    with pytest.raises(FormatError):
        decode_ppm(b"P3\n1 1\n255\n\0\0\0")
    with pytest.raises(FormatError):
        decode_ppm(buf[:-1])


def test_frame_directory(tmp_path):
    video = torch.rand(16, 3, 8, 8)
    paths = write_frames(video, tmp_path / "frames")
    assert [p.name for p in paths] == [frame_name(i, 16) for i in range(16)]
    assert paths[0].name == "000.ppm" and paths[-1].name == "015.ppm"
    assert (read_frames(tmp_path / "frames") - video).abs().max() <= 0.5 / 255 + 1e-7
    (tmp_path / "frames" / "007.ppm").unlink()
    with pytest.raises(FormatError, match="missing frame 007"):
        read_frames(tmp_path / "frames")


def test_media_and_split_round_trip(tmp_path):
    m = generate_sample(SceneParams.from_seed(1, "green", "fast"))
    write_media(m, tmp_path / "m")
    back = read_media(tmp_path / "m")
    assert back.caption == m.caption and back.impact_frames == m.impact_frames
    assert (back.video - m.video).abs().max() <= 0.5 / 255 + 1e-7
    assert (back.audio - m.audio).abs().max() <= 1 / 32767
    assert json.loads((tmp_path / "m" / "impacts.json").read_text())
    split = make_split([3, 4, 5])
    write_split(split, tmp_path / "s")
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["00000", "00001", "00002"]
    assert read_split(tmp_path / "s").captions() == split.captions()
    (tmp_path / "m" / "impacts.json").write_text("[]")
    with pytest.raises(FormatError):
        read_media(tmp_path / "m")
    (tmp_path / "m" / "caption.txt").unlink()
    with pytest.raises(FormatError):
        read_media(tmp_path / "m")
