import json

import numpy as np
import pytest

from tetshape import cli
from tetshape.evalkit import make_sphere, make_torus
from tetshape.meshio import read_obj, write_obj
from tetshape.shapefields import load_fields
from tetshape.tetgrid import load_grid


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A grid, two meshes, and their encodings built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["grid", "build", "--m", "2", "--levels", "2",
                     "-o", str(d / "g.bin")]) == 0
    write_obj(d / "sphere.obj", *_mesh_arrays(make_sphere(0.4, 2)))
    write_obj(d / "torus.obj", *_mesh_arrays(make_torus(0.3, 0.12)))
    assert cli.main(["encode", "--mesh", str(d / "sphere.obj"),
                     "--grid", str(d / "g.bin"), "-o", str(d / "sphere.tfld")]) == 0
    assert cli.main(["encode", "--mesh", str(d / "torus.obj"),
                     "--grid", str(d / "g.bin"), "-o", str(d / "torus.tfld")]) == 0
    return d


def _mesh_arrays(mesh):
    return mesh.vertices, mesh.faces


class TestGridCommands:
    def test_build_and_validate(self, tmp_path, capsys):
        out = tmp_path / "g.bin"
        assert cli.main(["grid", "build", "--m", "1", "--levels", "1",
                         "-o", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "resolved config" in stdout
        assert cli.main(["validate", str(out)]) == 0
        assert "all-pass" in capsys.readouterr().out

    def test_build_exports(self, tmp_path):
        assert cli.main(["grid", "build", "--m", "1", "--levels", "1",
                         "-o", str(tmp_path / "g.bin"),
                         "--vtk", str(tmp_path / "g.vtk"),
                         "--medit", str(tmp_path / "g.mesh")]) == 0
        assert (tmp_path / "g.vtk").read_text().startswith("# vtk")
        assert "Tetrahedra" in (tmp_path / "g.mesh").read_text()

    def test_resource_cap(self, tmp_path, capsys):
        rc = cli.main(["grid", "build", "--m", "5", "--levels", "3",
                       "--max-tets", "100", "-o", str(tmp_path / "g.bin")])
        assert rc == 1
        assert "exceeding" in capsys.readouterr().err

    def test_validate_missing_file(self, tmp_path, capsys):
        assert cli.main(["validate", str(tmp_path / "nope.bin")]) == 1
        assert "error" in capsys.readouterr().err

    def test_validate_corrupt_magic(self, tmp_path, capsys):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"WHAT" + b"\0" * 100)
        assert cli.main(["validate", str(p)]) == 1
        assert "magic" in capsys.readouterr().err


class TestEncodeExtract:
    def test_encode_then_extract(self, workdir, capsys):
        out = workdir / "sphere_out.obj"
        rc = cli.main(["extract", "--fields", str(workdir / "sphere.tfld"),
                       "--grid", str(workdir / "g.bin"), "-o", str(out),
                       "--no-smooth"])
        assert rc == 0
        v, f = read_obj(out)
        assert len(f) > 0

    def test_extract_with_filter_and_tet_export(self, workdir):
        rc = cli.main(["extract", "--fields", str(workdir / "sphere.tfld"),
                       "--grid", str(workdir / "g.bin"),
                       "-o", str(workdir / "s2.obj"),
                       "--mu", "0.05", "--gamma", "4.0",
                       "--tet-vtk", str(workdir / "s2.vtk"),
                       "--tet-medit", str(workdir / "s2.mesh")])
        assert rc == 0
        assert (workdir / "s2.vtk").exists()
        assert (workdir / "s2.mesh").exists()

    def test_inputs_not_mutated(self, workdir):
        before = (workdir / "sphere.tfld").read_bytes()
        cli.main(["extract", "--fields", str(workdir / "sphere.tfld"),
                  "--grid", str(workdir / "g.bin"),
                  "-o", str(workdir / "s3.obj")])
        assert (workdir / "sphere.tfld").read_bytes() == before


class TestConfig:
    def test_config_file_applied(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": {"m": 1, "levels": 1}}))
        assert cli.main(["--config", str(cfg), "grid", "build",
                         "-o", str(tmp_path / "g.bin")]) == 0
        g = load_grid(tmp_path / "g.bin")
        assert g.num_tets == 6

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": {"m": 3, "levels": 1}}))
        assert cli.main(["--config", str(cfg), "grid", "build", "--m", "1",
                         "-o", str(tmp_path / "g.bin")]) == 0
        assert load_grid(tmp_path / "g.bin").num_tets == 6

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": {"m": 1}, "unknown_section": {}}))
        assert cli.main(["--config", str(cfg), "grid", "build",
                         "-o", str(tmp_path / "g.bin")]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_resolved_config_printed(self, tmp_path, capsys):
        cli.main(["grid", "build", "--m", "1", "--levels", "1",
                  "-o", str(tmp_path / "g.bin")])
        out = capsys.readouterr().out
        parsed = json.loads(out[out.index("{"):out.index("wrote")])
        assert parsed["grid"]["m"] == 1


class TestModelCommands:
    @pytest.fixture(scope="class")
    def trained(self, workdir):
        model_path = workdir / "model.tgan"
        rc = cli.main([
            "train", "--grid", str(workdir / "g.bin"),
            "--toy-count", "4", "-o", str(model_path),
            "--loss-log", str(workdir / "loss.csv"),
            "--epochs", "2", "--batch", "2", "--latent", "4", "--width", "2",
            "--critic-width", "2", "--mode", "vae", "--seed", "0",
            "--manifest", str(workdir / "manifest.json"),
        ])
        assert rc == 0
        return model_path

    def test_train_outputs(self, trained, workdir):
        assert trained.exists()
        log = (workdir / "loss.csv").read_text().splitlines()
        assert log[0].startswith("epoch,step")
        assert len(log) >= 2
        manifest = json.loads((workdir / "manifest.json").read_text())
        assert len(manifest) == 4

    def test_reconstruct(self, trained, workdir):
        rc = cli.main(["reconstruct", "--model", str(trained),
                       "--fields", str(workdir / "sphere.tfld"),
                       "-o", str(workdir / "rec.tfld"),
                       "--obj", str(workdir / "rec.obj")])
        assert rc == 0
        assert load_fields(workdir / "rec.tfld").num_tets == 384
        assert (workdir / "rec.obj").exists()

    def test_sample_reproducible(self, trained, workdir):
        for name in ("a", "b"):
            assert cli.main(["sample", "--model", str(trained),
                             "--seed", "5", "-o", str(workdir / f"s_{name}.tfld")]) == 0
        assert (workdir / "s_a.tfld").read_bytes() == (workdir / "s_b.tfld").read_bytes()

    def test_interp_and_arith(self, trained, workdir):
        rc = cli.main(["interp", "--model", str(trained),
                       "--fields-a", str(workdir / "sphere.tfld"),
                       "--fields-b", str(workdir / "torus.tfld"),
                       "--t", "0.5", "-o", str(workdir / "mid.tfld")])
        assert rc == 0
        rc = cli.main(["arith", "--model", str(trained),
                       "--a", str(workdir / "sphere.tfld"),
                       "--b", str(workdir / "torus.tfld"),
                       "--c", str(workdir / "torus.tfld"),
                       "-o", str(workdir / "arith.tfld")])
        assert rc == 0

    def test_interp_endpoint_matches_reconstruction(self, trained, workdir):
        cli.main(["interp", "--model", str(trained),
                  "--fields-a", str(workdir / "sphere.tfld"),
                  "--fields-b", str(workdir / "torus.tfld"),
                  "--t", "0.0", "-o", str(workdir / "t0.tfld")])
        cli.main(["reconstruct", "--model", str(trained),
                  "--fields", str(workdir / "sphere.tfld"),
                  "-o", str(workdir / "rec0.tfld")])
        assert (workdir / "t0.tfld").read_bytes() == (workdir / "rec0.tfld").read_bytes()


class TestMetricsCommands:
    def test_chamfer(self, workdir, capsys):
        rc = cli.main(["metrics", "chamfer", "--a", str(workdir / "sphere.obj"),
                       "--b", str(workdir / "sphere.obj"), "--samples", "500"])
        assert rc == 0
        out = capsys.readouterr().out
        value = float(out.strip().splitlines()[-1].split()[-1])
        assert value <= 1e-10

    def test_variety(self, workdir, capsys):
        rc = cli.main(["metrics", "variety",
                       "--meshes", str(workdir / "*.obj"),
                       "--k", "3", "--n", "2", "--samples", "300"])
        assert rc == 0
        assert "variety" in capsys.readouterr().out

    def test_variety_needs_two(self, tmp_path, capsys):
        write_obj(tmp_path / "one.obj", *_mesh_arrays(make_sphere(0.3, 1)))
        assert cli.main(["metrics", "variety",
                         "--meshes", str(tmp_path / "*.obj")]) == 1


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert cli.main(["gradcheck", "--tol", "1e-4", "--m", "1",
                         "--levels", "2"]) == 0
        assert "all-pass" in capsys.readouterr().out
