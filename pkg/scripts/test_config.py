from app.core.config import Settings


def test_environment_overrides_defaults(monkeypatch):
    monkeypatch.setenv("PICARD_TOL", "1e-8")
    monkeypatch.setenv("DEFAULT_M_SCHEDULE", "[2, null]")
    s = Settings(_env_file=None)
    assert s.PICARD_TOL == 1e-8
    assert s.DEFAULT_M_SCHEDULE == [2, None]
    assert s.MAX_TREE_STEPS == 20


def test_env_file_ignores_unknown_keys(tmp_path, monkeypatch):
    monkeypatch.delenv("LOG_LEVEL", raising=False)
    env = tmp_path / ".env"
    env.write_text("LOG_LEVEL=DEBUG\nAPI_KEY=unused\n")
    s = Settings(_env_file=str(env))
    assert s.LOG_LEVEL == "DEBUG"
    assert not hasattr(s, "API_KEY")
