import re
import subprocess

import pytest

from repobuild.errors import ProtocolError, ScenarioExhaustedError
from repobuild.gateway import LlmConfig, ScriptedScenario
from repobuild.validation import (
    BinaryArtifact,
    FunctionCoverageReport,
    classify_file,
    default_symbol_extractor,
    discover_new_binaries,
    function_coverage,
    judge,
    llm_verdict,
    scan_source_functions,
)
from repobuild.workspace import snapshot_files

from conftest import prepare_fixture, workspace_at


def _cc(args, cwd):
    subprocess.run(["gcc"] + args, cwd=cwd, check=True, capture_output=True)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """One directory of real compiled artifacts, shared across the module."""
    root = tmp_path_factory.mktemp("cc")
    (root / "prog.c").write_text(
        "int helper(int x) { return x + 1; }\n"
        "int main(void) { return helper(41); }\n"
    )
    _cc(["-g", "-O0", "-o", "exe_debug", "prog.c"], root)
    _cc(["-s", "-o", "exe_plain", "prog.c"], root)
    _cc(["-no-pie", "-o", "exe_nopie", "prog.c"], root)
    _cc(["-g", "-shared", "-fPIC", "-o", "libdemo.so", "prog.c"], root)
    _cc(["-g", "-c", "-o", "part.o", "prog.c"], root)
    subprocess.run(
        ["ar", "rcs", "libdemo.a", "part.o"], cwd=root, check=True, capture_output=True
    )
    return root


class TestClassifyFile:
    def test_pie_executable_with_debug_info(self, built):
        assert classify_file(built / "exe_debug") == ("executable", True)

    def test_stripped_executable_lacks_debug_info(self, built):
        assert classify_file(built / "exe_plain") == ("executable", False)

    def test_non_pie_executable(self, built):
        kind, _ = classify_file(built / "exe_nopie")
        assert kind == "executable"

    def test_shared_object(self, built):
        assert classify_file(built / "libdemo.so") == ("shared-object", True)

    def test_object_file(self, built):
        assert classify_file(built / "part.o") == ("object-file", True)

    def test_static_archive(self, built):
        assert classify_file(built / "libdemo.a") == ("static-archive", False)

    def test_text_file_is_not_an_artifact(self, tmp_path):
        p = tmp_path / "notes.txt"
        p.write_text("just text\n")
        assert classify_file(p) is None

    def test_unrecognized_binary_is_not_an_artifact(self, tmp_path):
        p = tmp_path / "image.png"
        p.write_bytes(b"\x89PNG\r\n\x1a\n" + b"\x00" * 64)
        assert classify_file(p) is None

    def test_pe_header_is_other_binary(self, tmp_path):
        p = tmp_path / "tool.exe"
        p.write_bytes(b"MZ" + b"\x00" * 128)
        assert classify_file(p) == ("other-binary", False)

    def test_macho_magic_is_other_binary(self, tmp_path):
        p = tmp_path / "tool"
        p.write_bytes(b"\xcf\xfa\xed\xfe" + b"\x00" * 128)
        assert classify_file(p) == ("other-binary", False)

    def test_missing_file_returns_none(self, tmp_path):
        assert classify_file(tmp_path / "absent") is None

    def test_truncated_elf_returns_none(self, tmp_path):
        p = tmp_path / "stub"
        p.write_bytes(b"\x7fELF" + b"\x00" * 10)
        assert classify_file(p) is None


class TestBinaryArtifact:
    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError, match="unknown artifact class"):
            BinaryArtifact("a", "a", "weird-kind", False)

    def test_known_classes_accepted(self):
        art = BinaryArtifact("bin/app", "app", "executable", True)
        assert art.file_name == "app"


class TestDiscoverNewBinaries:
    def test_new_executable_found_after_build(self, tmp_path):
        ws = prepare_fixture("hello_make", tmp_path)
        before = snapshot_files(ws)
        subprocess.run(
            ["make"], cwd=ws.root_path, check=True, capture_output=True
        )
        after = snapshot_files(ws)
        arts = discover_new_binaries(before, after, ws)
        assert [a.file_name for a in arts] == ["hello"]
        assert arts[0].classify == "executable"
        assert arts[0].rel_path == "hello"

    def test_text_outputs_ignored(self, tmp_path):
        (tmp_path / "main.c").write_text("int main(void){return 0;}\n")
        ws = workspace_at(tmp_path)
        before = snapshot_files(ws)
        (tmp_path / "build.log").write_text("gcc ran fine\n")
        _cc(["-c", "-o", "main.o", "main.c"], tmp_path)
        after = snapshot_files(ws)
        arts = discover_new_binaries(before, after, ws)
        assert [a.rel_path for a in arts] == ["main.o"]
        assert arts[0].classify == "object-file"

    def test_modified_binary_counts_as_new(self, tmp_path):
        (tmp_path / "main.c").write_text("int main(void){return 0;}\n")
        _cc(["-o", "app", "main.c"], tmp_path)
        ws = workspace_at(tmp_path)
        before = snapshot_files(ws)
        (tmp_path / "main.c").write_text("int main(void){return 7;}\n")
        _cc(["-o", "app", "main.c"], tmp_path)
        after = snapshot_files(ws)
        assert [a.file_name for a in discover_new_binaries(before, after, ws)] == ["app"]

    def test_untouched_binary_not_reported(self, tmp_path):
        (tmp_path / "main.c").write_text("int main(void){return 0;}\n")
        _cc(["-o", "app", "main.c"], tmp_path)
        ws = workspace_at(tmp_path)
        before = snapshot_files(ws)
        after = snapshot_files(ws)
        assert discover_new_binaries(before, after, ws) == []

    def test_results_sorted_by_path(self, tmp_path):
        (tmp_path / "main.c").write_text("int main(void){return 0;}\n")
        ws = workspace_at(tmp_path)
        before = snapshot_files(ws)
        _cc(["-o", "zeta", "main.c"], tmp_path)
        _cc(["-o", "alpha", "main.c"], tmp_path)
        after = snapshot_files(ws)
        names = [a.rel_path for a in discover_new_binaries(before, after, ws)]
        assert names == sorted(names)


def _art(name, classify="executable", rel=None):
    return BinaryArtifact(rel or name, name, classify, False)


class TestJudge:
    def test_all_criteria_met(self):
        v = judge([_art("app")], ["app"])
        assert (v.completion, v.strict, v.flexible) == (True, True, True)
        assert v.matched_names == frozenset({"app"})

    def test_object_files_alone_do_not_complete(self):
        v = judge([_art("main.o", "object-file")], ["app"])
        assert (v.completion, v.strict, v.flexible) == (False, False, False)

    def test_shared_object_counts_for_completion(self):
        v = judge([_art("libx.so", "shared-object")], ["app"])
        assert v.completion is True
        assert v.strict is False

    def test_partial_match_is_flexible_not_strict(self):
        v = judge([_art("app")], ["app", "tool"])
        assert v.strict is False
        assert v.flexible is True
        assert v.matched_names == frozenset({"app"})

    def test_expected_names_compare_on_base_name(self):
        v = judge([_art("app", rel="build/app")], ["bin/app"])
        assert v.strict is True

    def test_names_are_case_sensitive(self):
        v = judge([_art("App")], ["app"])
        assert v.flexible is False

    def test_no_expected_names_means_no_name_criteria(self):
        v = judge([_art("whatever")], [])
        assert v.completion is True
        assert v.strict is False
        assert v.flexible is False

    def test_no_artifacts_at_all(self):
        v = judge([], ["app"])
        assert (v.completion, v.strict, v.flexible) == (False, False, False)
        assert v.new_binaries == ()

    def test_new_binaries_keeps_object_files(self):
        v = judge([_art("a.o", "object-file"), _art("app")], ["app"])
        assert len(v.new_binaries) == 2


class TestScanSourceFunctions:
    def test_plain_definitions(self):
        text = "int add(int a, int b) {\n return a+b;\n}\nvoid run(void) { }\n"
        assert scan_source_functions(text) == ["add", "run"]

    def test_declarations_not_counted(self):
        assert scan_source_functions("int add(int a, int b);\n") == []

    def test_control_statements_not_functions(self):
        text = (
            "int f(int x) {\n"
            "  if (x) { x--; }\n"
            "  while (x > 0) { x--; }\n"
            "  for (;;) { break; }\n"
            "  switch (x) { default: break; }\n"
            "  return x;\n"
            "}\n"
        )
        assert scan_source_functions(text) == ["f"]

    def test_aggregate_initializer_not_a_definition(self):
        text = "int table[] = {1, 2, 3};\nint go(void) { return table[0]; }\n"
        assert scan_source_functions(text) == ["go"]

    def test_commented_out_code_ignored(self):
        text = "/* int ghost(void) { return 0; } */\nint real(void) { return 1; }\n"
        assert scan_source_functions(text) == ["real"]

    def test_line_comment_ignored(self):
        text = "// int ghost(void) { return 0; }\nint real(void) { return 1; }\n"
        assert scan_source_functions(text) == ["real"]

    def test_string_literal_contents_ignored(self):
        text = 'const char *s = "int fake(void) {";\nint real(void) { return 0; }\n'
        assert scan_source_functions(text) == ["real"]

    def test_preprocessor_macros_ignored(self):
        text = (
            "#define HELPER(x) do { (x)++; } while (0)\n"
            "#define LONG_MACRO(a) \\\n    ((a) * 2)\n"
            "int real(void) { return 0; }\n"
        )
        assert scan_source_functions(text) == ["real"]

    def test_cpp_method_definition_uses_short_name(self):
        text = "int Widget::resize(int w) {\n  return w;\n}\n"
        assert scan_source_functions(text) == ["resize"]

    def test_const_method_suffix(self):
        text = "int Widget::size() const {\n  return 4;\n}\n"
        assert scan_source_functions(text) == ["size"]

    def test_nested_blocks_do_not_produce_names(self):
        text = "int outer(void) {\n  { int x = 0; }\n  return 0;\n}\n"
        assert scan_source_functions(text) == ["outer"]

    def test_multiline_parameter_list(self):
        text = "static long compute(int first,\n    int second)\n{\n  return first;\n}\n"
        assert scan_source_functions(text) == ["compute"]


class TestDefaultSymbolExtractor:
    def test_reads_function_names_from_debug_info(self, built):
        names = default_symbol_extractor(built / "exe_debug")
        assert "main" in names
        assert "helper" in names

    def test_binary_without_debug_info_yields_nothing(self, built):
        assert default_symbol_extractor(built / "exe_plain") == []

    def test_unreadable_target_raises(self, tmp_path):
        with pytest.raises(RuntimeError, match="readelf failed"):
            default_symbol_extractor(tmp_path / "absent")


class TestFunctionCoverage:
    def _build_coverage_repo(self, tmp_path):
        ws = prepare_fixture("coverage_repo", tmp_path)
        before = snapshot_files(ws)
        subprocess.run(["make"], cwd=ws.root_path, check=True, capture_output=True)
        after = snapshot_files(ws)
        return ws, discover_new_binaries(before, after, ws)

    def test_partial_build_coverage_and_hotspots(self, tmp_path):
        ws, arts = self._build_coverage_repo(tmp_path)
        report = function_coverage(ws, arts)
        assert report.undefined is False
        assert report.coverage_pct == pytest.approx(100.0 * 2 / 3, abs=0.1)
        assert report.top_uncompiled_dirs == [("tests", 1)]
        assert ("extra_check", "tests/unused.c") in report.source_functions
        assert "helper" in report.compiled_functions

    def test_full_coverage_repo(self, tmp_path):
        (tmp_path / "main.c").write_text(
            "int only(void) { return 3; }\nint main(void) { return only(); }\n"
        )
        _cc(["-g", "-O0", "-o", "app", "main.c"], tmp_path)
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("app", "app", "executable", True)]
        report = function_coverage(ws, arts)
        assert report.coverage_pct == pytest.approx(100.0)
        assert report.top_uncompiled_dirs == []

    def test_undefined_without_debug_artifacts(self, tmp_path):
        (tmp_path / "main.c").write_text("int main(void) { return 0; }\n")
        ws = workspace_at(tmp_path)
        report = function_coverage(ws, [])
        assert report.undefined is True
        assert report.coverage_pct == 0.0

    def test_undefined_without_source_files(self, tmp_path):
        (tmp_path / "README.md").write_text("no code here\n")
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("app", "app", "executable", True)]
        report = function_coverage(ws, arts, symbol_extractor=lambda p: ["main"])
        assert report.undefined is True

    def test_injected_extractor_controls_the_numerator(self, tmp_path):
        (tmp_path / "a.c").write_text(
            "int f1(void){return 1;}\nint f2(void){return 2;}\n"
            "int f3(void){return 3;}\nint f4(void){return 4;}\n"
        )
        (tmp_path / "fake").write_bytes(b"\x00")
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("fake", "fake", "executable", True)]
        report = function_coverage(
            ws, arts, symbol_extractor=lambda p: ["f1", "f2", "f4"]
        )
        assert report.coverage_pct == pytest.approx(75.0)

    def test_artifacts_without_debug_info_skipped(self, tmp_path):
        (tmp_path / "a.c").write_text("int f1(void){return 1;}\n")
        ws = workspace_at(tmp_path)
        calls = []

        def spy(path):
            calls.append(path)
            return ["f1"]

        arts = [BinaryArtifact("app", "app", "executable", False)]
        report = function_coverage(ws, arts, symbol_extractor=spy)
        assert calls == []
        assert report.undefined is True

    def test_extractor_failure_degrades_to_undefined(self, tmp_path, caplog):
        (tmp_path / "a.c").write_text("int f1(void){return 1;}\n")
        (tmp_path / "app").write_bytes(b"\x00")
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("app", "app", "executable", True)]

        def broken(path):
            raise RuntimeError("boom")

        with caplog.at_level("WARNING"):
            report = function_coverage(ws, arts, symbol_extractor=broken)
        assert report.undefined is True
        assert any("symbol extraction failed" in r.message for r in caplog.records)

    def test_git_directory_not_scanned(self, tmp_path):
        (tmp_path / "a.c").write_text("int f1(void){return 1;}\n")
        hidden = tmp_path / ".git" / "junk"
        hidden.mkdir(parents=True)
        (hidden / "hook.c").write_text("int ghost(void){return 0;}\n")
        (tmp_path / "app").write_bytes(b"\x00")
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("app", "app", "executable", True)]
        report = function_coverage(ws, arts, symbol_extractor=lambda p: ["f1"])
        assert report.coverage_pct == pytest.approx(100.0)

    def test_root_level_sources_grouped_under_dot(self, tmp_path):
        (tmp_path / "a.c").write_text(
            "int hit(void){return 1;}\nint miss(void){return 2;}\n"
        )
        (tmp_path / "app").write_bytes(b"\x00")
        ws = workspace_at(tmp_path)
        arts = [BinaryArtifact("app", "app", "executable", True)]
        report = function_coverage(ws, arts, symbol_extractor=lambda p: ["hit"])
        assert report.top_uncompiled_dirs == [(".", 1)]


def _report(pct=66.7, top=None, undefined=False):
    return FunctionCoverageReport(
        source_functions={("main", "src/main.c")},
        compiled_functions={"main"},
        coverage_pct=pct,
        top_uncompiled_dirs=top or [],
        undefined=undefined,
    )


def _cfg(scenario):
    return LlmConfig(backend="scripted", scenario=scenario)


class TestLlmVerdict:
    def test_yes_with_rationale(self):
        scenario = ScriptedScenario(
            default_reply="VERDICT: yes\nRATIONALE: binaries and log both look healthy."
        )
        ok, rationale = llm_verdict("make: done", _report(), [], _cfg(scenario))
        assert ok is True
        assert rationale == "binaries and log both look healthy."

    def test_no_verdict_parses_without_rationale(self):
        scenario = ScriptedScenario(default_reply="VERDICT: no")
        ok, rationale = llm_verdict("errors", _report(), [], _cfg(scenario))
        assert ok is False
        assert rationale == ""

    def test_labels_case_insensitive(self):
        scenario = ScriptedScenario(default_reply="verdict: YES\nrationale: fine")
        ok, rationale = llm_verdict("log", _report(), [], _cfg(scenario))
        assert ok is True
        assert rationale == "fine"

    def test_prompt_carries_all_signals(self):
        arts = [
            BinaryArtifact("build/tool", "tool", "executable", True),
            BinaryArtifact("x.o", "x.o", "object-file", True),
        ]
        report = _report(pct=81.5, top=[("lib", 4)])
        scenario = ScriptedScenario(
            steps=[
                (
                    re.compile(
                        r"(?s)unique-log-line.*tool.*81\.5%.*lib: 4 functions missing"
                    ),
                    "VERDICT: yes\nRATIONALE: ok",
                )
            ]
        )
        ok, _ = llm_verdict("unique-log-line at tail", report, arts, _cfg(scenario))
        assert ok is True

    def test_object_files_not_listed_as_executables(self):
        arts = [BinaryArtifact("x.o", "x.o", "object-file", True)]
        scenario = ScriptedScenario(
            steps=[("Produced executables: (none)", "VERDICT: no\nRATIONALE: nothing")]
        )
        ok, _ = llm_verdict("log", _report(), arts, _cfg(scenario))
        assert ok is False

    def test_undefined_coverage_rendered_as_text(self):
        scenario = ScriptedScenario(
            steps=[("undefined", "VERDICT: no\nRATIONALE: no coverage signal")]
        )
        ok, _ = llm_verdict("log", _report(undefined=True), [], _cfg(scenario))
        assert ok is False

    def test_log_truncated_to_tail(self):
        log = "EARLY-MARKER " + "x" * 5000 + " LATE-MARKER"
        scenario = ScriptedScenario(
            steps=[
                (re.compile("LATE-MARKER"), "VERDICT: yes\nRATIONALE: ok"),
            ]
        )
        llm_verdict(log, _report(), [], _cfg(scenario), log_tail_chars=100)
        early_scenario = ScriptedScenario(steps=[("EARLY-MARKER", "unused")])
        with pytest.raises(ScenarioExhaustedError):
            llm_verdict(log, _report(), [], _cfg(early_scenario), log_tail_chars=100)

    def test_malformed_reply_reasked_once(self):
        scenario = ScriptedScenario(
            steps=[
                ("did not follow the required format", "VERDICT: yes\nRATIONALE: fixed"),
            ],
            default_reply="I think it went well overall.",
        )
        ok, rationale = llm_verdict("log", _report(), [], _cfg(scenario))
        assert ok is True
        assert rationale == "fixed"

    def test_persistent_malformed_reply_raises(self):
        scenario = ScriptedScenario(default_reply="no labels here")
        with pytest.raises(ProtocolError, match="VERDICT"):
            llm_verdict("log", _report(), [], _cfg(scenario))

    def test_verdict_must_be_a_whole_word(self):
        scenario = ScriptedScenario(default_reply="VERDICT: yesterday\nRATIONALE: x")
        with pytest.raises(ProtocolError):
            llm_verdict("log", _report(), [], _cfg(scenario))
