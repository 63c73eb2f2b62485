import math
from pathlib import Path

import numpy as np
import pytest

import config
from services.fields import band_limited_random
from services.run_config import (
    ConfigError,
    FourierTerm,
    build_initial,
    exact_gradient,
    fourier_field,
    killing_rotation,
    parse_config,
    parse_config_text,
    scalar_function,
)
from services.snapshot import write_snapshot

TORUS_CONFIG = """
# flat torus, translation plus one Fourier mode
[manifold]
kind = flat_torus_t2
resolution = 16, 16

[flow]
variant = main
integrator = rk4
dt_safety = 0.4
t_end = auto

[initial]
kind = killing_rotation + fourier_mode
amplitude = 2.0
terms = sin 1 cos 0 0 1.0; cos 0 sin 2 1 0.5

[output]
monitor_stride = 7
"""


def test_parses_a_full_config():
    cfg = parse_config_text(TORUS_CONFIG)
    assert cfg.manifold.kind == "flat_torus_t2"
    assert cfg.manifold.resolution == (16, 16)
    assert cfg.flow.dt_safety == 0.4
    assert cfg.flow.t_end is None
    assert cfg.flow.monitor_stride == 7
    assert cfg.initial.kinds == ("killing_rotation", "fourier_mode")
    assert cfg.initial.terms == (
        FourierTerm("sin", 1, "cos", 0, 0, 1.0),
        FourierTerm("cos", 0, "sin", 2, 1, 0.5),
    )
    assert cfg.output.directory == config.OUT_DIR / "run"
    assert cfg.echo["initial"]["seed"] == "0"


def test_initial_field_sums_its_parts(torus16):
    cfg = parse_config_text(TORUS_CONFIG)
    x = build_initial(cfg.initial, torus16)
    xc, yc = torus16.grid.coords
    # amplitude scales the rotation, not the Fourier terms
    np.testing.assert_allclose(x[0], 2.0 + np.sin(xc))
    np.testing.assert_allclose(x[1], 0.5 * np.sin(2.0 * yc))


@pytest.mark.parametrize(
    "text, key",
    [
        ("[manifold]\nkind = flat_torus_t2\n", "manifold.resolution"),
        ("[manifold]\nkind = flat_torus_t2\nresolution = 16 16\n", "initial.kind"),
        ("[manifold]\nkind = flat_torus_t2\nresolution = 16 16\nshape = round\n", "manifold.shape"),
        ("[manifold]\nkind = flat_torus_t2\nkind = unit_sphere_s2\n", "manifold.kind"),
        ("[manifold]\nkind = flat_torus_t2\nresolution = 16 16\n[flow]\ndt_safety = fast\n[initial]\nkind = killing_rotation\n", "flow.dt_safety"),
        ("[colors]\nred = 1\n", "colors"),
    ],
)
def test_bad_keys_are_reported_with_their_name(text, key):
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert excinfo.value.key == key


def test_errors_carry_the_line_number():
    text = "[manifold]\nkind = flat_torus_t2\nresolution = 16 16\n\n[initial]\nkind = killing_rotation\nspin = 3\n"
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert excinfo.value.line == 7
    assert "line 7" in str(excinfo.value)


@pytest.mark.parametrize(
    "text, line, key",
    [
        ("[manifold]\nkind = flat_torus_t2\n\n[manifold]\nresolution = 16 16\n", 4, "manifold"),
        ("kind = flat_torus_t2\n[manifold]\n", 1, None),
        ("[manifold]\nkind = flat_torus_t2\nresolution 16 16\n", 3, None),
        ("[manifold]\nkind = flat_torus_t2\nresolution = 16 16\nkind = unit_sphere_s2\n", 4, "manifold.kind"),
    ],
)
def test_malformed_files_point_at_the_offending_line(text, line, key):
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert excinfo.value.line == line
    assert excinfo.value.key == key


def test_comments_and_case_of_section_names():
    text = "; header\n[Manifold]\nkind = flat_torus_t2  # inline\nresolution = 16 16\n[initial]\nkind = killing_rotation\n"
    cfg = parse_config_text(text)
    assert cfg.manifold.kind == "flat_torus_t2"
    assert cfg.manifold.resolution == (16, 16)


@pytest.mark.parametrize(
    "manifold, initial",
    [
        ("kind = perturbed_torus\nresolution = 16 16\nperturbation_amplitude = 0.2", "kind = killing_rotation"),
        ("kind = unit_sphere_s2\nresolution = 16 32", "kind = fourier_mode\nterms = sin 1 sin 1 0 1.0"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = fourier_mode"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = gradient_of\nfunction = cos_theta"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = killing_rotation\naxis = w"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = fourier_mode\nterms = tan 1 sin 1 0 1.0"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = file\npath = nowhere.kvf"),
        ("kind = flat_torus_t2\nresolution = 4 4", "kind = killing_rotation"),
        ("kind = flat_torus_t2\nresolution = 16 16", "kind = spiral"),
    ],
)
def test_invalid_initial_fields_are_config_errors(manifold, initial):
    with pytest.raises(ConfigError):
        parse_config_text(f"[manifold]\n{manifold}\n[initial]\n{initial}\n")


def test_flow_validation_becomes_a_config_error():
    text = "[manifold]\nkind = flat_torus_t2\nresolution = 16 16\n[flow]\nvariant = ricci\n[initial]\nkind = killing_rotation\n"
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_seed_override_and_output_directory(tmp_path):
    path = tmp_path / "sphere_run.cfg"
    path.write_text(
        "[manifold]\nkind = unit_sphere_s2\nresolution = 16 32\n"
        "[initial]\nkind = random_bandlimited\nseed = 5\n"
        "[output]\ndirectory = results\n",
        encoding="utf-8",
    )
    cfg = parse_config(path, seed=11)
    assert cfg.initial.seed == 11
    assert cfg.output.directory == tmp_path / "results"
    assert parse_config(path).initial.seed == 5

    path.write_text("[manifold]\nkind = unit_sphere_s2\nresolution = 16 32\n[initial]\nkind = random_bandlimited\n", encoding="utf-8")
    assert parse_config(path).output.directory == config.OUT_DIR / "sphere_run"

    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "missing.cfg")


def test_file_initial_field_is_read_relative_to_the_config(tmp_path, sphere16):
    x = band_limited_random(sphere16, 3)
    write_snapshot(tmp_path / "start.kvf", x, sphere16)
    path = tmp_path / "from_file.cfg"
    path.write_text(
        "[manifold]\nkind = unit_sphere_s2\nresolution = 16 32\n[initial]\nkind = file + killing_rotation\npath = start.kvf\n",
        encoding="utf-8",
    )
    cfg = parse_config(path)
    assert cfg.initial.path == tmp_path / "start.kvf"
    np.testing.assert_array_equal(build_initial(cfg.initial, sphere16), x + killing_rotation(sphere16))


def test_random_initial_field_is_seeded(sphere16):
    cfg = parse_config_text(
        "[manifold]\nkind = unit_sphere_s2\nresolution = 16 32\n[initial]\nkind = random_bandlimited\namplitude = 3\nmodes = 2\n",
        seed=4,
    )
    np.testing.assert_array_equal(build_initial(cfg.initial, sphere16), 3.0 * band_limited_random(sphere16, 4, 2))


def test_scalar_functions_and_their_gradients(torus16, sphere16, s3_coarse):
    np.testing.assert_allclose(scalar_function("one", s3_coarse), 1.0)
    xc, _yc = torus16.grid.coords
    np.testing.assert_allclose(exact_gradient("neg_cos_x", torus16)[0], np.sin(xc))
    th, _ph = sphere16.grid.coords
    np.testing.assert_allclose(exact_gradient("cos_theta", sphere16)[0], -np.sin(th))
    with pytest.raises(ConfigError):
        scalar_function("cos_theta", torus16)


def test_killing_rotations(sphere16, s3_coarse, perturbed24):
    th, ph = sphere16.grid.coords
    about_x = killing_rotation(sphere16, axis="x")
    np.testing.assert_allclose(about_x[0], -np.sin(ph))
    assert killing_rotation(s3_coarse)[2].tolist() == [1.0] * s3_coarse.n_nodes
    with pytest.raises(ConfigError):
        killing_rotation(perturbed24)


def test_fourier_field_needs_a_torus(sphere16, torus16):
    terms = (FourierTerm("cos", 1, "cos", 1, 1, 2.0),)
    xc, yc = torus16.grid.coords
    np.testing.assert_allclose(fourier_field(terms, torus16)[1], 2.0 * np.cos(xc) * np.cos(yc))
    with pytest.raises(ConfigError):
        fourier_field(terms, sphere16)
    assert math.isclose(np.abs(fourier_field(terms, torus16)[0]).max(), 0.0)


def test_example_configs_parse():
    for path in sorted(Path(config.BASE_DIR, "configs").glob("*.ini")):
        parse_config(path)


def test_checked_in_sphere_and_navier_stokes_grids():
    resolutions = {
        path.stem: parse_config(path).manifold
        for path in Path(config.BASE_DIR, "configs").glob("*.ini")
    }
    for name, spec in resolutions.items():
        if spec.kind == "unit_sphere_s2":
            # pole rows make lambda_max grow like h^-4
            assert spec.resolution[0] <= 32, name
    assert resolutions["ns_decay_torus"].resolution == (96, 96)
    assert resolutions["ns_decay_divfree"].resolution == (96, 96)
