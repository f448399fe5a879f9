import json
from pathlib import Path

import numpy as np
import pytest

from stpp_plots.common import SchemaError, load_grid, load_prediction
from stpp_plots.density import FigureSpec, main as density_main, plot_density
from stpp_plots.times import main as times_main, plot_times

FIXTURES = Path(__file__).parent / "fixtures"


class TestDensityScript:
    def test_single_grid_smoke(self, tmp_path):
        out = tmp_path / "one.png"
        code = density_main([str(FIXTURES / "density_event57.json"), "-o", str(out)])
        assert code == 0
        assert out.exists() and out.stat().st_size > 0

    def test_three_slot_fixture_gives_three_panels(self, tmp_path):
        out = tmp_path / "three.png"
        code = density_main([str(FIXTURES), "-o", str(out)])
        assert code == 0
        assert out.stat().st_size > 0
        spec = FigureSpec(
            grid_paths=sorted(FIXTURES.glob("density_event*.json"))
            + sorted(FIXTURES.glob("diff_event*.json")),
            prediction_path=FIXTURES / "prediction.json",
        )
        fig, panels = plot_density(spec)
        assert len(panels) == 3
        kinds = [k for k, _ in panels]
        assert kinds == ["density", "difference", "difference"]
        import matplotlib.pyplot as plt

        plt.close(fig)

    def test_constant_grid_is_uniform(self):
        spec = FigureSpec(grid_paths=[FIXTURES / "constant_grid.json"])
        fig, panels = plot_density(spec)
        image = fig.axes[0].get_images()[0].get_array()
        assert float(np.ptp(image)) == 0.0
        import matplotlib.pyplot as plt

        plt.close(fig)

    def test_schema_mismatch_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        doc = json.loads((FIXTURES / "density_event57.json").read_text())
        doc["meta"]["schema_version"] = 99
        bad.write_text(json.dumps(doc))
        code = density_main([str(bad), "-o", str(tmp_path / "x.png")])
        assert code == 1
        assert "schema" in capsys.readouterr().err

    def test_rerun_overwrites(self, tmp_path):
        out = tmp_path / "re.png"
        for _ in range(2):
            assert density_main([str(FIXTURES), "-o", str(out)]) == 0
        assert out.stat().st_size > 0

    def test_inputs_never_mutated(self, tmp_path):
        before = (FIXTURES / "density_event57.json").read_bytes()
        density_main([str(FIXTURES), "-o", str(tmp_path / "y.png")])
        assert (FIXTURES / "density_event57.json").read_bytes() == before


class TestTimesScript:
    def test_three_point_fixture(self, tmp_path):
        out = tmp_path / "t.png"
        code = times_main([str(FIXTURES / "prediction.json"), "-o", str(out)])
        assert code == 0
        assert out.stat().st_size > 0

    def test_perfect_predictions_render(self, tmp_path):
        doc = {"t_hat": [1.0, 2.0, 3.0], "true_t": [1.0, 2.0, 3.0]}
        fig = plot_times(doc)
        paths = fig.axes[0].collections
        assert len(paths) == 2  # predicted and true marker sets
        import matplotlib.pyplot as plt

        plt.close(fig)

    def test_missing_field_nonzero_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"t_hat": [1.0]}))
        code = times_main([str(bad), "-o", str(tmp_path / "z.png")])
        assert code == 1
        assert "true_t" in capsys.readouterr().err


class TestSchemaHelpers:
    def test_load_grid_ok(self):
        doc = load_grid(FIXTURES / "density_event57.json")
        assert doc["grid"]["steps"] == 24

    def test_load_prediction_length_mismatch(self, tmp_path):
        bad = tmp_path / "p.json"
        bad.write_text(json.dumps({"t_hat": [1.0, 2.0], "true_t": [1.0]}))
        with pytest.raises(SchemaError):
            load_prediction(bad)
