import pytest

from refgroup.config import RunConfig
from refgroup.encoders import ConfigError


def test_defaults_are_desk_scale():
    c = RunConfig()
    assert (c.data.image_size, c.model.n_tokens, c.model.token_dim, c.model.text_dim) == (64, 8, 32, 32)
    assert c.model.visual_dims == (64, 32, 16, 8)
    assert (c.train.lr, c.train.epochs, c.train.batch_size) == (1e-3, 30, 16)
    assert (c.data.n_train, c.data.n_val, c.data.n_test) == (500, 100, 100)


def test_text_round_trip():
    c = RunConfig().replace(model__grouping="soft", data__unseen=("ring", "bar"), tau__mode="fixed:0.1")
    assert RunConfig.from_text(c.to_text()) == c
    assert RunConfig.from_single_line(c.to_single_line()) == c


def test_comments_and_blank_lines():
    c = RunConfig.from_text("# comment\n\ntrain.epochs = 3\nloss.mode = infonce  # trailing\n")
    assert c.train.epochs == 3 and c.loss.mode == "infonce"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_text("model.n_tokenz = 4\n")


def test_bad_choice_rejected():
    with pytest.raises(ConfigError):
        RunConfig().replace(decoder__mode="sideways").validate()


@pytest.mark.parametrize("tokens,expected", [("full", 8), ("single", 1), ("off", 0)])
def test_effective_tokens(tokens, expected):
    cfg = RunConfig().replace(model__tokens=tokens, loss__contrastive="on" if expected > 1 else "off")
    assert cfg.effective_tokens() == expected
