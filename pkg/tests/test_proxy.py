import pytest
import torch

from hshield.metrics import ProxyEncoder, load_proxy, proxy_sim, save_proxy, train_proxy_encoder

from conftest import rand_image


@pytest.fixture(scope="module")
def trained_encoder():
    images = [rand_image(16, s) for s in range(8)]
    return train_proxy_encoder(images, steps=30, seed=0)


def test_self_similarity_is_one(trained_encoder):
    x = rand_image(16, 42)
    assert proxy_sim(trained_encoder, [x], [x]) == pytest.approx(1.0, abs=1e-5)


def test_orthogonal_embeddings_score_zero():
    # bypass the convnet: score the cosine math directly
    enc = ProxyEncoder()

    class _Stub(ProxyEncoder):
        def __init__(self):
            super().__init__()
            self.calls = 0

        def embed(self, x):
            out = torch.zeros(x.shape[0], 4)
            for i in range(x.shape[0]):
                out[i, self.calls % 4] = 1.0
                self.calls += 1
            return out

    stub = _Stub()
    a, b = torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8)
    sim = float((stub.embed(a) @ stub.embed(b).T).mean())
    assert sim == 0.0
    assert enc.embed_dim == 128


def test_symmetric_in_arguments(trained_encoder):
    sa = [rand_image(16, s) for s in range(3)]
    sb = [rand_image(16, s + 50) for s in range(4)]
    assert proxy_sim(trained_encoder, sa, sb) == pytest.approx(
        proxy_sim(trained_encoder, sb, sa), abs=1e-7)


def test_range(trained_encoder):
    sa = [rand_image(16, s) for s in range(3)]
    sb = [rand_image(16, s + 9) for s in range(3)]
    v = proxy_sim(trained_encoder, sa, sb)
    assert -1.0 <= v <= 1.0


def test_empty_set_rejected(trained_encoder):
    with pytest.raises(ValueError):
        proxy_sim(trained_encoder, [], [rand_image(16, 0)])


def test_deterministic_training():
    images = [rand_image(16, s) for s in range(6)]
    a = train_proxy_encoder(images, steps=10, seed=3)
    b = train_proxy_encoder(images, steps=10, seed=3)
    assert a.checkpoint_hash() == b.checkpoint_hash()


def test_checkpoint_roundtrip_and_hash_pin(trained_encoder, tmp_path):
    h = save_proxy(trained_encoder, tmp_path / "proxy.pt")
    loaded = load_proxy(tmp_path / "proxy.pt", expected_hash=h)
    x = rand_image(16, 5)
    assert torch.equal(loaded.embed(x), trained_encoder.embed(x))
    with pytest.raises(ValueError):
        load_proxy(tmp_path / "proxy.pt", expected_hash="deadbeef")


def test_embeddings_distinguish_content(trained_encoder):
    # same image twice vs a very different image
    x = rand_image(16, 0)
    y = (1.0 - x).clamp(0, 1)
    self_sim = proxy_sim(trained_encoder, [x], [x])
    cross_sim = proxy_sim(trained_encoder, [x], [y])
    assert self_sim > cross_sim
