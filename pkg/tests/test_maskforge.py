"""Mask synthesis tests: geometric rasterization, elastic warps, PCA sampling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.ndimage import binary_dilation

from conftest import circle_mask
from lesionforge.errors import DataIOError, DegenerateOutputError, ValidationError
from lesionforge.maskforge import (
    GEOMETRIC_KINDS,
    DeformationField,
    ShapeModel,
    control_grid,
    elastic_deform,
    fit_pca_shape_model,
    import_mask,
    load_shape_model,
    make_geometric_mask,
    pca_shape_vector,
    random_geometric_spec,
    sample_pca_mask,
    save_shape_model,
)


# ---------------------------------------------------------------------------
# Geometric masks
# ---------------------------------------------------------------------------

class TestGeometric:
    @pytest.mark.parametrize("radius", [3.0, 5.0, 10.0])
    def test_circle_count_near_analytic_area(self, radius):
        mask = make_geometric_mask({"kind": "circle", "radius": radius}, 64)
        count = int(mask.sum())
        # pixel-center rasterization error is bounded by the perimeter
        assert abs(count - np.pi * radius**2) <= 2 * np.pi * radius

    def test_circle_matches_brute_force_membership(self):
        side, cx, cy, r = 32, 13.0, 17.5, 6.25
        mask = make_geometric_mask({"kind": "circle", "cx": cx, "cy": cy, "radius": r}, side)
        expect = np.zeros((side, side), np.uint8)
        for row in range(side):
            for col in range(side):
                x, y = col + 0.5, row + 0.5
                if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
                    expect[row, col] = 1
        assert np.array_equal(mask, expect)

    def test_circle_boundary_is_inclusive(self):
        # pixel (16, 19) has center (19.5, 16.5): distance exactly 3 from (16.5, 16.5)
        mask = make_geometric_mask({"kind": "circle", "cx": 16.5, "cy": 16.5, "radius": 3.0}, 32)
        assert mask[16, 19] == 1
        assert mask[16, 20] == 0

    def test_circle_default_center_is_frame_center(self):
        explicit = make_geometric_mask({"kind": "circle", "cx": 24.0, "cy": 24.0, "radius": 5}, 48)
        implicit = make_geometric_mask({"kind": "circle", "radius": 5}, 48)
        assert np.array_equal(explicit, implicit)

    def test_circle_monotone_in_radius(self):
        small = make_geometric_mask({"kind": "circle", "radius": 5}, 64)
        big = make_geometric_mask({"kind": "circle", "radius": 10}, 64)
        assert np.all(big[small == 1] == 1)

    def test_round_ellipse_equals_circle(self):
        circ = make_geometric_mask({"kind": "circle", "radius": 7}, 64)
        ell = make_geometric_mask({"kind": "ellipse", "rx": 7, "ry": 7}, 64)
        assert np.array_equal(circ, ell)

    def test_ellipse_quarter_turn_swaps_radii(self):
        rotated = make_geometric_mask({"kind": "ellipse", "rx": 10, "ry": 5, "angle": 90.0}, 64)
        swapped = make_geometric_mask({"kind": "ellipse", "rx": 5, "ry": 10, "angle": 0.0}, 64)
        assert np.array_equal(rotated, swapped)

    def test_axis_aligned_square_polygon_exact(self):
        mask = make_geometric_mask(
            {"kind": "polygon", "vertices": [(8, 8), (24, 8), (24, 24), (8, 24)]}, 32
        )
        expect = np.zeros((32, 32), np.uint8)
        expect[8:24, 8:24] = 1  # centers 8.5..23.5 lie inside [8, 24]
        assert np.array_equal(mask, expect)

    def test_polygon_boundary_centers_included(self):
        # edges pass exactly through pixel centers 8.5 and 24.5
        mask = make_geometric_mask(
            {"kind": "polygon", "vertices": [(8.5, 8.5), (24.5, 8.5), (24.5, 24.5), (8.5, 24.5)]},
            32,
        )
        assert int(mask.sum()) == 17 * 17

    def test_right_triangle_exact_count(self):
        # centers (x, y) with x, y in {8.5..23.5} and x + y <= 32 (hypotenuse
        # inclusive): sum over c + r <= 31 of pairs = 1 + 2 + ... + 16 = 136
        mask = make_geometric_mask(
            {"kind": "polygon", "vertices": [(8, 8), (24, 8), (8, 24)]}, 32
        )
        assert int(mask.sum()) == 136

    def test_star_count_near_analytic_area(self):
        spec = {"kind": "star", "cx": 16.5, "cy": 16.5, "points": 5,
                "outer_radius": 12.0, "inner_radius": 6.0}
        mask = make_geometric_mask(spec, 33)
        area = 5 * 12.0 * 6.0 * np.sin(np.pi / 5)  # n * R * r * sin(pi/n)
        edge = np.sqrt(144 + 36 - 2 * 12 * 6 * np.cos(np.pi / 5))
        assert abs(int(mask.sum()) - area) <= 10 * edge  # perimeter bound

    def test_star_subset_of_outer_circle(self):
        spec = {"kind": "star", "cx": 16.5, "cy": 16.5, "points": 6,
                "outer_radius": 11.0, "inner_radius": 5.0, "phase": 15.0}
        star = make_geometric_mask(spec, 33)
        disc = make_geometric_mask({"kind": "circle", "cx": 16.5, "cy": 16.5, "radius": 11.6}, 33)
        assert np.all(disc[star == 1] == 1)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError, match="unknown shape kind"):
            make_geometric_mask({"kind": "blob", "radius": 4}, 32)

    def test_small_radius_rejected(self):
        with pytest.raises(ValidationError, match="radius must be >= 1"):
            make_geometric_mask({"kind": "circle", "radius": 0.5}, 32)
        with pytest.raises(ValidationError, match="radii must be >= 1"):
            make_geometric_mask({"kind": "ellipse", "rx": 0.2, "ry": 5}, 32)

    def test_out_of_frame_rejected(self):
        with pytest.raises(ValidationError, match="does not fit inside"):
            make_geometric_mask({"kind": "circle", "cx": 4, "cy": 16, "radius": 6}, 32)
        with pytest.raises(ValidationError, match="does not fit inside"):
            make_geometric_mask(
                {"kind": "polygon", "vertices": [(-1, 4), (10, 4), (5, 12)]}, 32
            )

    def test_self_intersecting_polygon_rejected(self):
        bowtie = [(4, 4), (20, 20), (20, 4), (4, 20)]
        with pytest.raises(ValidationError, match="self-intersecting"):
            make_geometric_mask({"kind": "polygon", "vertices": bowtie}, 32)

    def test_too_few_vertices_rejected(self):
        with pytest.raises(ValidationError, match="at least 3 vertices"):
            make_geometric_mask({"kind": "polygon", "vertices": [(4, 4), (20, 20)]}, 32)

    def test_degenerate_star_rejected(self):
        base = {"kind": "star", "cx": 16, "cy": 16}
        with pytest.raises(ValidationError, match="degenerate star"):
            make_geometric_mask({**base, "points": 2, "outer_radius": 8, "inner_radius": 3}, 32)
        with pytest.raises(ValidationError, match="degenerate star"):
            make_geometric_mask({**base, "points": 5, "outer_radius": 3, "inner_radius": 8}, 32)
        with pytest.raises(ValidationError, match="degenerate star"):
            make_geometric_mask({**base, "points": 5, "outer_radius": 8, "inner_radius": 0.5}, 32)

    def test_sliver_polygon_rejected_as_too_small(self):
        sliver = [(8, 8), (24, 8.02), (8, 8.01)]
        with pytest.raises(ValidationError, match="fewer than 2 pixels"):
            make_geometric_mask({"kind": "polygon", "vertices": sliver}, 32)

    def test_bad_side_rejected(self):
        with pytest.raises(ValidationError, match="side must be >= 1"):
            make_geometric_mask({"kind": "circle", "radius": 3}, 0)

    def test_spec_dict_not_mutated(self):
        spec = {"kind": "circle", "radius": 5.0}
        make_geometric_mask(spec, 32)
        assert spec == {"kind": "circle", "radius": 5.0}

    @pytest.mark.parametrize("seed", range(25))
    def test_random_specs_always_rasterize(self, seed):
        spec = random_geometric_spec(np.random.default_rng(seed), 48)
        assert spec["kind"] in GEOMETRIC_KINDS
        mask = make_geometric_mask(spec, 48)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.sum() >= 2

    def test_random_spec_deterministic(self):
        a = random_geometric_spec(np.random.default_rng(123), 64)
        b = random_geometric_spec(np.random.default_rng(123), 64)
        assert repr(a) == repr(b)


# ---------------------------------------------------------------------------
# Elastic deformation
# ---------------------------------------------------------------------------

class TestElastic:
    def test_zero_amplitude_is_bitwise_identity(self):
        mask = circle_mask(32, 16, 16, 9)
        field = DeformationField(amplitude=0.0, smoothing_sigma=3.0, seed=42)
        assert np.array_equal(elastic_deform(mask, field), mask)

    def test_zero_amplitude_identity_on_random_masks(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            mask = (rng.random((24, 24)) < 0.3).astype(np.uint8)
            if mask.sum() == 0:
                mask[3, 3] = 1
            field = DeformationField(amplitude=0.0, smoothing_sigma=float(rng.uniform(0, 5)),
                                     seed=int(rng.integers(1 << 16)))
            assert np.array_equal(elastic_deform(mask, field), mask)

    def test_same_field_reproduces_bitwise(self):
        mask = circle_mask(32, 14, 18, 8)
        field = DeformationField(amplitude=4.0, smoothing_sigma=3.0, seed=7)
        assert np.array_equal(elastic_deform(mask, field), elastic_deform(mask, field))

    def test_different_seeds_differ(self):
        mask = circle_mask(32, 16, 16, 8)
        out0 = elastic_deform(mask, DeformationField(amplitude=5.0, smoothing_sigma=4.0, seed=0))
        out1 = elastic_deform(mask, DeformationField(amplitude=5.0, smoothing_sigma=4.0, seed=1))
        assert not np.array_equal(out0, mask)
        assert not np.array_equal(out0, out1)

    def test_output_strictly_binary(self):
        mask = circle_mask(32, 16, 16, 8)
        for seed in range(8):
            out = elastic_deform(mask, DeformationField(amplitude=6.0, smoothing_sigma=2.0, seed=seed))
            assert out.dtype == np.uint8
            assert set(np.unique(out)) <= {0, 1}

    def test_displacement_bounded_by_amplitude(self):
        # every output pixel reads a source at most amplitude + 0.5 away per
        # axis, so the warped foreground sits inside a Chebyshev dilation
        mask = circle_mask(32, 16, 16, 8)
        amp = 2.0
        out = elastic_deform(mask, DeformationField(amplitude=amp, smoothing_sigma=2.0, seed=3))
        reach = int(np.ceil(amp + 0.5))
        hull = binary_dilation(mask.astype(bool), np.ones((2 * reach + 1,) * 2, bool))
        assert np.all(hull[out.astype(bool)])

    def test_non_square_rejected(self):
        mask = np.ones((16, 24), np.uint8)
        with pytest.raises(ValidationError, match="square"):
            elastic_deform(mask, DeformationField(amplitude=1.0, smoothing_sigma=1.0))

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            elastic_deform(np.zeros((16, 16), np.uint8),
                           DeformationField(amplitude=1.0, smoothing_sigma=1.0))

    def test_emptied_output_raises_degenerate(self):
        corner = np.zeros((16, 16), np.uint8)
        corner[:2, :2] = 1
        field = DeformationField(amplitude=60.0, smoothing_sigma=0.0, seed=0)
        with pytest.raises(DegenerateOutputError, match="emptied the mask"):
            elastic_deform(corner, field)

    def test_field_parameter_validation(self):
        with pytest.raises(ValidationError, match="amplitude"):
            DeformationField(amplitude=-1.0, smoothing_sigma=1.0).validate()
        with pytest.raises(ValidationError, match="grid_size"):
            DeformationField(amplitude=1.0, smoothing_sigma=1.0, grid_size=1).validate()
        with pytest.raises(ValidationError, match="smoothing_sigma"):
            DeformationField(amplitude=1.0, smoothing_sigma=-0.5).validate()

    def test_control_grid_shape_bounds_and_determinism(self):
        field = DeformationField(amplitude=3.0, smoothing_sigma=0.0, seed=11, grid_size=5)
        grid = control_grid(field)
        assert grid.shape == (2, 5, 5)
        assert np.abs(grid).max() <= 3.0
        assert np.array_equal(grid, control_grid(field))
        other = control_grid(DeformationField(amplitude=3.0, smoothing_sigma=0.0, seed=12, grid_size=5))
        assert not np.array_equal(grid, other)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        amplitude=st.floats(0.0, 8.0, allow_nan=False),
        sigma=st.floats(0.0, 6.0, allow_nan=False),
        radius=st.integers(4, 10),
    )
    def test_property_binary_and_deterministic(self, seed, amplitude, sigma, radius):
        mask = circle_mask(28, 14, 14, radius)
        field = DeformationField(amplitude=amplitude, smoothing_sigma=sigma, seed=seed)
        try:
            out = elastic_deform(mask, field)
        except DegenerateOutputError:
            return
        assert out.dtype == np.uint8
        assert set(np.unique(out)) <= {0, 1}
        assert np.array_equal(out, elastic_deform(mask, field))


# ---------------------------------------------------------------------------
# PCA shape model
# ---------------------------------------------------------------------------

def _random_masks(n=6, side=8, seed=9):
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(n):
        m = (rng.random((side, side)) < 0.45).astype(np.uint8)
        if m.sum() == 0:
            m[0, 0] = 1
        masks.append(m)
    return masks


class TestShapeModel:
    def test_components_orthonormal(self):
        model = fit_pca_shape_model(_random_masks(), k=5)
        gram = model.components @ model.components.T
        assert np.abs(gram - np.eye(model.k)).max() < 1e-8

    def test_eigenvalues_sorted_and_nonnegative(self):
        model = fit_pca_shape_model(_random_masks(), k=5)
        assert np.all(np.diff(model.eigenvalues) <= 0)
        assert np.all(model.eigenvalues >= 0)

    def test_eigenvalues_match_covariance_oracle(self):
        masks = _random_masks()
        model = fit_pca_shape_model(masks, k=5)
        data = np.stack([m.ravel().astype(np.float64) for m in masks])
        top = np.linalg.eigvalsh(np.cov(data, rowvar=False))[::-1][: model.k]
        assert np.abs(top - model.eigenvalues).max() < 1e-8

    def test_projection_variance_equals_eigenvalue(self):
        masks = _random_masks()
        model = fit_pca_shape_model(masks, k=5)
        data = np.stack([m.ravel().astype(np.float64) for m in masks])
        proj = (data - model.mean) @ model.components.T
        assert np.abs(proj.var(axis=0, ddof=1) - model.eigenvalues).max() < 1e-8

    def test_full_rank_reconstruction(self):
        masks = _random_masks()
        model = fit_pca_shape_model(masks, k=len(masks) - 1)
        for m in masks:
            x = m.ravel().astype(np.float64)
            coef = model.components @ (x - model.mean)
            rec = model.mean + coef @ model.components
            assert np.sqrt(np.mean((rec - x) ** 2)) < 1e-6

    def test_mean_is_foreground_frequency(self):
        masks = _random_masks(n=4, side=6, seed=3)
        model = fit_pca_shape_model(masks, k=2)
        expect = np.mean([m.ravel() for m in masks], axis=0)
        assert np.array_equal(model.mean, expect)

    def test_requested_k_beyond_rank_truncates_with_warning(self):
        masks = _random_masks()
        with pytest.warns(UserWarning, match="exceeds the data rank"):
            model = fit_pca_shape_model(masks, k=40)
        assert model.k == len(masks) - 1

    def test_fit_input_validation(self):
        with pytest.raises(ValidationError, match="at least 2 masks"):
            fit_pca_shape_model(_random_masks(n=1), k=1)
        with pytest.raises(ValidationError, match="k must be >= 1"):
            fit_pca_shape_model(_random_masks(), k=0)
        mixed = [np.ones((4, 4), np.uint8), np.ones((6, 6), np.uint8)]
        with pytest.raises(ValidationError, match="mixed dimensions"):
            fit_pca_shape_model(mixed, k=1)

    def test_validate_rejects_broken_models(self):
        model = fit_pca_shape_model(_random_masks(), k=3)
        skewed = ShapeModel(
            mean=model.mean, components=model.components * 1.5,
            eigenvalues=model.eigenvalues, height=model.height,
            width=model.width, n_train=model.n_train,
        )
        with pytest.raises(ValidationError, match="orthonormal"):
            skewed.validate()
        shuffled = ShapeModel(
            mean=model.mean, components=model.components,
            eigenvalues=model.eigenvalues[::-1].copy(), height=model.height,
            width=model.width, n_train=model.n_train,
        )
        with pytest.raises(ValidationError, match="non-increasing"):
            shuffled.validate()

    def test_shape_vector_matches_manual_formula(self):
        model = fit_pca_shape_model(_random_masks(), k=4)
        weights = {0: 0.8, 2: -0.5, 3: 0.1}
        vec = pca_shape_vector(model, weights)
        manual = model.mean.copy()
        for idx, w in weights.items():
            manual += w * np.sqrt(model.eigenvalues[idx]) * model.components[idx]
        assert np.array_equal(vec, manual)

    def test_zero_weights_give_exact_mean(self):
        model = fit_pca_shape_model(_random_masks(), k=3)
        assert np.array_equal(pca_shape_vector(model, {}), model.mean)

    def test_weight_validation(self):
        model = fit_pca_shape_model(_random_masks(), k=3)
        with pytest.raises(ValidationError, match="out of range"):
            pca_shape_vector(model, {3: 0.5})
        with pytest.raises(ValidationError, match="outside \\[-1, 1\\]"):
            pca_shape_vector(model, {0: 1.5})

    def test_zero_weight_sample_is_binarized_mean(self):
        model = fit_pca_shape_model(_random_masks(), k=3)
        sample = sample_pca_mask(model, {})
        expect = (model.mean >= 0.5).astype(np.uint8).reshape(model.height, model.width)
        assert np.array_equal(sample, expect)

    def test_sample_empty_threshold_raises(self):
        # disjoint foregrounds: mean is 1/3 everywhere it is nonzero
        masks = []
        for i in range(3):
            m = np.zeros((6, 6), np.uint8)
            m[2 * i, 2 * i] = 1
            m[2 * i, 2 * i + 1] = 1
            masks.append(m)
        model = fit_pca_shape_model(masks, k=2)
        with pytest.raises(DegenerateOutputError, match="empty mask"):
            sample_pca_mask(model, {})

    def test_save_load_round_trip_bitwise(self, tmp_path):
        model = fit_pca_shape_model(_random_masks(), k=4)
        path = tmp_path / "shapes.lfsm"
        save_shape_model(model, path)
        loaded = load_shape_model(path)
        assert np.array_equal(loaded.mean, model.mean)
        assert np.array_equal(loaded.components, model.components)
        assert np.array_equal(loaded.eigenvalues, model.eigenvalues)
        assert (loaded.height, loaded.width, loaded.n_train) == (
            model.height, model.width, model.n_train)
        second = tmp_path / "again.lfsm"
        save_shape_model(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_load_rejects_bad_magic_and_version(self, tmp_path):
        model = fit_pca_shape_model(_random_masks(), k=2)
        path = tmp_path / "shapes.lfsm"
        save_shape_model(model, path)
        blob = bytearray(path.read_bytes())
        fake = tmp_path / "bad_magic.lfsm"
        fake.write_bytes(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(DataIOError, match="bad magic"):
            load_shape_model(fake)
        bumped = bytearray(blob)
        bumped[4:8] = struct.pack("<I", 99)
        vpath = tmp_path / "bad_version.lfsm"
        vpath.write_bytes(bytes(bumped))
        with pytest.raises(DataIOError, match="version"):
            load_shape_model(vpath)
        with pytest.raises(DataIOError, match="cannot read"):
            load_shape_model(tmp_path / "missing.lfsm")


# ---------------------------------------------------------------------------
# Mask import
# ---------------------------------------------------------------------------

class TestImportMask:
    def test_antialiased_file_binarized_at_midpoint(self, tmp_path):
        raw = np.zeros((16, 16), np.uint8)
        raw[:, 0:4] = 0
        raw[:, 4:8] = 127
        raw[:, 8:12] = 128
        raw[:, 12:16] = 255
        path = tmp_path / "soft.png"
        Image.fromarray(raw, mode="L").save(path)
        mask = import_mask(path, 16)
        assert np.all(mask[:, :8] == 0)
        assert np.all(mask[:, 8:] == 1)

    def test_import_resizes_to_requested_side(self, tmp_path):
        raw = np.zeros((32, 32), np.uint8)
        raw[8:24, 8:24] = 255
        path = tmp_path / "big.png"
        Image.fromarray(raw, mode="L").save(path)
        mask = import_mask(path, 16)
        assert mask.shape == (16, 16)
        assert set(np.unique(mask)) <= {0, 1}
        assert mask[8, 8] == 1 and mask[0, 0] == 0
