import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamp import config as cfgmod
from lamp.errors import ConfigError


def test_defaults_when_empty():
    cfgs = cfgmod.parse_text("")
    assert cfgs["stage1"] == cfgmod.Stage1Config()
    assert cfgs["eval"].seed_list() == [0, 1, 2]
    assert cfgs["datagen"].task_list() == ["push", "pick_place", "stack"]


def test_parse_values_comments_and_alias():
    text = """
    # desk overrides
    stage1.lr = 0.0005      # halve it
    stage1.mask_depth = true
    guidance.mode = add
    eval.seeds = 4,5
    """
    cfgs = cfgmod.parse_text(text)
    assert cfgs["stage1"].lr == 0.0005 and cfgs["stage1"].mask_depth is True
    assert cfgs["stage2"].guidance_mode == "add"
    assert cfgs["eval"].seed_list() == [4, 5]


@pytest.mark.parametrize("text", [
    "stage1.nope = 1",
    "nosection.lr = 1",
    "stage1.lr",
    "stage1.steps = many",
    "stage1.mask_depth = maybe",
])
def test_bad_lines_raise(text):
    with pytest.raises(ConfigError):
        cfgmod.parse_text(text)


def test_dump_load_round_trip(tmp_path):
    cfgs = cfgmod.parse_text("stage2.guidance_g0 = -4.0\ndatagen.episodes = 12\n")
    path = tmp_path / "c.cfg"
    path.write_text(cfgmod.dump(cfgs))
    assert cfgmod.load(path) == cfgs


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10**6), st.floats(1e-6, 1.0), st.booleans())
def test_round_trip_property(steps, lr, mask):
    text = f"stage1.steps = {steps}\nstage1.lr = {lr!r}\nstage1.mask_depth = {str(mask).lower()}\n"
    cfgs = cfgmod.parse_text(text)
    assert cfgmod.parse_text(cfgmod.dump(cfgs)) == cfgs


def test_describe_lists_every_key():
    text = cfgmod.describe()
    for section, cls in cfgmod.SECTIONS.items():
        for name in cls.__dataclass_fields__:
            assert f"{section}.{name} " in text
    assert "full scale" in text


def test_from_dict_rejects_unknown_keys():
    d = cfgmod.to_dict(cfgmod.Stage1Config())
    assert cfgmod.from_dict(cfgmod.Stage1Config, d) == cfgmod.Stage1Config()
    with pytest.raises(ConfigError):
        cfgmod.from_dict(cfgmod.Stage1Config, {**d, "bogus": 1})


def test_with_seed():
    assert cfgmod.with_seed(cfgmod.Stage2Config(), 9).seed == 9
    assert cfgmod.with_seed(cfgmod.Stage2Config(), None).seed == 0
