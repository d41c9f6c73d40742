import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaseg.encoders import TEXT_LEN, tokenize
from metaseg.prompts import (DEFAULT_TEMPLATE, SIMPLE_PROMPT, CannedProvider, ClimateGrid,
                             ClimateLookupError, GridFormatError, HttpProvider, ImageMetadata,
                             PromptBundle, ProviderError, assemble_bundle, build_question,
                             build_vocabulary, default_grid, load_canned, lookup_climate,
                             question_hash, simple_prompt_bundle)

CLASSES = ["background", "building", "tree", "agriculture", "road"]
POTSDAM = (52.4, 13.1)
NANJING = (32.06, 118.80)


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary()


def test_reference_cities_resolve_to_expected_zones():
    g = default_grid()
    assert lookup_climate(*POTSDAM, g).description == "temperate continental"
    assert lookup_climate(*NANJING, g).description == "subtropical monsoon"
    assert lookup_climate(*POTSDAM, g).code == "Dfb" and lookup_climate(*NANJING, g).code == "Cwa"


def test_lookup_errors():
    g = default_grid()
    with pytest.raises(ValueError):
        lookup_climate(91.0, 0.0, g)
    with pytest.raises(ClimateLookupError):
        lookup_climate(0.0, -150.0, g)  # open ocean


def test_lookup_snaps_to_cell_centre():
    g = ClimateGrid({(int(10.25 * 4), int(20.75 * 4)): "Cfb"}, {"Cfb": "temperate oceanic"})
    for lat, lon in ((10.01, 20.51), (10.49, 20.99), (10.25, 20.75)):
        assert lookup_climate(lat, lon, g).code == "Cfb"
    with pytest.raises(ClimateLookupError):
        lookup_climate(10.51, 20.75, g)


@given(st.floats(-90, 90), st.floats(-180, 180))
def test_lookup_is_pure(lat, lon):
    g = default_grid()
    try:
        a = lookup_climate(lat, lon, g)
    except ClimateLookupError:
        with pytest.raises(ClimateLookupError):
            lookup_climate(lat, lon, g)
        return
    assert lookup_climate(lat, lon, g) == a


def test_malformed_grid(tmp_path):
    bad = tmp_path / "grid.csv"
    bad.write_text("52.25,13.25\n")
    with pytest.raises(GridFormatError):
        ClimateGrid.load(bad)
    bad.write_text("52.25,13.25,Xyz\n")
    with pytest.raises(GridFormatError):
        ClimateGrid.load(bad)
    bad.write_text("north,13.25,Dfb\n")
    with pytest.raises(GridFormatError):
        ClimateGrid.load(bad)


def test_metadata_bounds():
    with pytest.raises(ValueError):
        ImageMetadata(0.0, 181.0)
    with pytest.raises(ValueError):
        ImageMetadata(0.0, 0.0, resolution_m=0.0)


def test_questions():
    z = default_grid().zone("Dfb")
    q = build_question("tree", z)
    assert "tree" in q and "temperate continental" in q and "{" not in q
    assert q == build_question("tree", z)
    assert DEFAULT_TEMPLATE.startswith("Describe the shape, color, and texture of {class}")
    with pytest.raises(ValueError):
        build_question("tree", z, "Describe {class}.")


def test_canned_lookup_and_fallback(caplog):
    table = load_canned()
    g = default_grid()
    p = CannedProvider()
    assert p.answer("q", zone=g.zone("Cfb"), class_name="tree") == table[("Cfb", "tree")]
    with caplog.at_level("WARNING"):
        ans = p.answer("q", zone=g.zone("ET"), class_name="tree")
    assert ans and "no canned prompt" in caplog.text


def test_bundle_contract(vocab):
    meta = ImageMetadata(*POTSDAM)
    b = assemble_bundle(meta, CLASSES, CannedProvider(), vocab)
    assert b.token_ids.shape == (TEXT_LEN,) and b.pad_mask.shape == (TEXT_LEN,)
    assert b.merged_text == " ".join(t for _, t in b.per_class_prompts)
    assert [c for c, _ in b.per_class_prompts] == CLASSES
    n = int((~b.pad_mask).sum())
    assert not b.pad_mask[:n].any() and b.pad_mask[n:].all()
    # detokenizing gives back the normalised words of the merged text
    assert vocab.decode(b.token_ids) == " ".join(tokenize(b.merged_text))


def test_bundle_deterministic_and_serialisable(vocab):
    meta = ImageMetadata(*NANJING)
    a = assemble_bundle(meta, CLASSES, CannedProvider(), vocab)
    b = assemble_bundle(meta, CLASSES, CannedProvider(), vocab)
    assert a.merged_text.encode() == b.merged_text.encode()
    assert a.token_ids.tobytes() == b.token_ids.tobytes()
    c = PromptBundle.from_json(a.to_json())
    assert np.array_equal(c.token_ids, a.token_ids) and c.merged_text == a.merged_text


def test_all_fallback_bundle_is_valid(vocab):
    b = assemble_bundle(ImageMetadata(*POTSDAM), CLASSES, CannedProvider(table={}), vocab)
    assert b.token_ids.shape == (TEXT_LEN,) and b.pad_mask[-1]


def test_overflow_truncates_tail(vocab):
    long = {("Dfb", c): " ".join(["tree"] * 100) for c in CLASSES}
    b = assemble_bundle(ImageMetadata(*POTSDAM), CLASSES, CannedProvider(table=long), vocab)
    assert b.token_ids.shape == (TEXT_LEN,) and not b.pad_mask.any()


def test_simple_prompt(vocab):
    a, b = simple_prompt_bundle(vocab), simple_prompt_bundle(vocab)
    assert a.merged_text == SIMPLE_PROMPT == "It is a remote sensing image."
    assert (~a.pad_mask).sum() <= 10 and a.token_ids.tobytes() == b.token_ids.tobytes()
    assert 1 not in a.token_ids  # every word is in the vocabulary


def test_empty_class_list(vocab):
    with pytest.raises(ValueError):
        assemble_bundle(ImageMetadata(*POTSDAM), [], CannedProvider(), vocab)


# ---------------------------------------------------------------- http provider


class _Handler(BaseHTTPRequestHandler):
    calls = 0

    def do_POST(self):
        _Handler.calls += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        text = "answer to " + body["messages"][0]["content"][:20]
        out = json.dumps({"choices": [{"message": {"content": text}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *a):
        pass


def test_http_provider_caches(tmp_path):
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    try:
        url = f"http://127.0.0.1:{srv.server_port}/v1/chat/completions"
        p = HttpProvider(url, "toy", tmp_path / "cache")
        a = p.answer("Describe tree")
        assert p.network_calls == 1
        b = p.answer("Describe tree")
        assert a == b and p.network_calls == 1 and _Handler.calls == 1
        assert (tmp_path / "cache" / f"{question_hash('Describe tree')}.json").exists()
        # a fresh provider on the same cache needs no network either
        q = HttpProvider(url, "toy", tmp_path / "cache")
        assert q.answer("Describe tree") == a and q.network_calls == 0
    finally:
        srv.shutdown()


def test_http_provider_unreachable(tmp_path):
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    p = HttpProvider(f"http://127.0.0.1:{port}/x", "toy", tmp_path, retries=3, timeout=1.0, backoff=0.0)
    with pytest.raises(ProviderError) as e:
        p.answer("Describe road")
    assert question_hash("Describe road")[:12] in str(e.value) and "3 retries" in str(e.value)
    assert p.network_calls == 3
