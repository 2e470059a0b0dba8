use super::*;

pub(crate) const LISTING_1: &str = "os: linux\ndist: xenial\nlanguage: python\npython: 3.6\n";
pub(crate) const LISTING_2: &str =
    "install: \n  - pip install -r requirements.txt\nscript: # run experiment\n  - python main.py\n";

fn listing_1_2() -> PipelineConfig {
    PipelineConfig::parse(&format!("{LISTING_1}{LISTING_2}")).unwrap()
}

#[test]
fn environment_listing_parses() {
    // Listing 1 alone has no stage commands, so it is checked inside a full config.
    let cfg = listing_1_2();
    assert_eq!(
        cfg.base_env,
        EnvironmentSpec {
            os: Os::Linux,
            dist: Some("xenial".into()),
            language: Some("python".into()),
            language_version: Some("3.6".into()),
            env_vars: BTreeMap::new(),
        }
    );
    assert_eq!(
        PipelineConfig::parse(LISTING_1).unwrap_err(),
        ConfigError::Validation("no stage commands".into())
    );
}

#[test]
fn workflow_listing_parses() {
    let (cfg, warnings) = parse_config(LISTING_2).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg.stages.install, ["pip install -r requirements.txt"]);
    assert_eq!(cfg.stages.run, ["python main.py"]);
    assert!(cfg.stages.build.is_empty() && cfg.stages.test.is_empty() && cfg.stages.deploy.is_empty());
    assert_eq!(cfg.base_env.os, Os::Linux);
    assert_eq!(cfg.timeout_minutes, 50);
    assert_eq!(effective_stages(&cfg), [Stage::Info, Stage::Install, Stage::Run]);
}

#[test]
fn empty_document_has_no_stage_commands() {
    assert_eq!(
        PipelineConfig::parse("").unwrap_err(),
        ConfigError::Validation("no stage commands".into())
    );
}

#[test]
fn effective_stage_examples() {
    let full = PipelineConfig::parse(
        "install: [a]\nbuild: [b]\ntest: [c]\ndeploy: [d]\nrun: [e]\nreport: [f]\n",
    )
    .unwrap();
    assert_eq!(
        effective_stages(&full),
        [Stage::Info, Stage::Install, Stage::Build, Stage::Test, Stage::Deploy, Stage::Run, Stage::Report]
    );
    let only_report = PipelineConfig::parse("report: [f]\n").unwrap();
    assert_eq!(effective_stages(&only_report), [Stage::Info, Stage::Report]);
}

#[test]
fn script_and_run_together_rejected() {
    let e = PipelineConfig::parse("run: [a]\nscript: [b]\n").unwrap_err();
    assert!(matches!(e, ConfigError::Validation(m) if m.contains("alias")));
}

#[test]
fn unknown_keys_warn() {
    let (cfg, warnings) = parse_config("run: [a]\nsudo: required\ncache: pip\n").unwrap();
    assert_eq!(cfg.stages.run, ["a"]);
    assert_eq!(warnings.len(), 2);
    assert_eq!(warnings[0].line, 2);
    assert!(warnings[0].message.contains("sudo"));
}

#[test]
fn mismatched_shorthand_rejected() {
    let e = PipelineConfig::parse("language: python\nnode: 12\nrun: [a]\n").unwrap_err();
    assert!(matches!(&e, ConfigError::Validation(m) if m.contains("`node`")), "{e}");
    let e = PipelineConfig::parse("python: 3.6\nrun: [a]\n").unwrap_err();
    assert!(matches!(&e, ConfigError::Validation(m) if m.contains("requires")), "{e}");
}

#[test]
fn shorthand_may_precede_language() {
    let cfg = PipelineConfig::parse("python: \"3.10\"\nlanguage: python\nrun: [a]\n").unwrap();
    assert_eq!(cfg.base_env.language_version.as_deref(), Some("3.10"));
}

#[test]
fn validation_errors() {
    let cases = [
        ("env:\n  1BAD: x\nrun: [a]\n", "bad env var name"),
        ("run: ['  ']\n", "empty command"),
        ("run: [a]\ntimeout_minutes: 0\n", "timeout_minutes"),
        ("run: [a]\nartifacts: [/etc/passwd]\n", "absolute"),
        ("run: [a]\nartifacts: [../out.csv]\n", ".."),
        ("run: [a]\nos: beos\n", "unknown os"),
        ("run: [a]\nmatrix:\n  - env: {S: 1}\n  - env: {S: 1}\n", "duplicate matrix entry"),
        ("run: [a]\nmatrix: {include: x}\n", "matrix"),
    ];
    for (src, needle) in cases {
        match PipelineConfig::parse(src) {
            Err(ConfigError::Validation(m)) => assert!(m.contains(needle), "{src:?}: {m}"),
            other => panic!("{src:?}: expected validation error, got {other:?}"),
        }
    }
}

#[test]
fn syntax_error_carries_line() {
    let e = PipelineConfig::parse("install:\n  - a\n   - b\n").unwrap_err();
    assert_eq!(e.line(), Some(3));
}

#[test]
fn empty_matrix_expands_to_one_job() {
    let jobs = expand_matrix(&listing_1_2());
    assert_eq!(jobs.len(), 1);
    assert_eq!(jobs[0].matrix_index, 0);
    assert_eq!(jobs[0].env, listing_1_2().base_env);
    let stages: Vec<_> = jobs[0].stage_plan.iter().map(|p| p.stage).collect();
    assert_eq!(stages, [Stage::Install, Stage::Run]);
}

#[test]
fn shard_matrix_matches_hand_expansion() {
    let src = "language: python\npython: 3.6\nenv:\n  MODE: full\nrun: [python main.py]\nmatrix:\n  - env:\n      SHARD: 0\n  - env:\n      SHARD: 1\n";
    let cfg = PipelineConfig::parse(src).unwrap();
    let jobs = expand_matrix(&cfg);

    // Hand-expanded expectation.
    let env = |shard: &str| EnvironmentSpec {
        os: Os::Linux,
        dist: None,
        language: Some("python".into()),
        language_version: Some("3.6".into()),
        env_vars: [("MODE".to_string(), "full".to_string()), ("SHARD".to_string(), shard.to_string())]
            .into_iter()
            .collect(),
    };
    let plan = vec![PlannedStage { stage: Stage::Run, commands: vec!["python main.py".into()] }];
    let expected = vec![
        JobSpec { env: env("0"), stage_plan: plan.clone(), artifacts: ArtifactSpec::default(), timeout_minutes: 50, matrix_index: 0 },
        JobSpec { env: env("1"), stage_plan: plan, artifacts: ArtifactSpec::default(), timeout_minutes: 50, matrix_index: 1 },
    ];
    assert_eq!(jobs, expected);
}

#[test]
fn version_override_matches_hand_expansion() {
    let src = "language: python\npython: 3.6\nrun: [x]\nmatrix:\n  - python: 3.8\n  - os: macos\n";
    let jobs = expand_matrix(&PipelineConfig::parse(src).unwrap());
    assert_eq!(jobs[0].env.language_version.as_deref(), Some("3.8"));
    assert_eq!(jobs[0].env.os, Os::Linux);
    assert_eq!(jobs[1].env.language_version.as_deref(), Some("3.6"));
    assert_eq!(jobs[1].env.os, Os::Macos);
}

#[test]
fn env_vars_merge_keywise() {
    let src = "env: {A: base, B: base}\nrun: [x]\nmatrix:\n  - env: {B: over, C: new}\n";
    let jobs = expand_matrix(&PipelineConfig::parse(src).unwrap());
    let vars: Vec<_> = jobs[0].env.env_vars.iter().map(|(k, v)| format!("{k}={v}")).collect();
    assert_eq!(vars, ["A=base", "B=over", "C=new"]);
}

#[test]
fn lint_listing_1_2() {
    // Rules applied by hand: python pinned (no unpinned warning); one job on
    // linux (single-OS); run present without artifacts; run stage exists.
    let codes: Vec<_> = lint(&listing_1_2()).into_iter().map(|d| d.message).collect();
    assert_eq!(codes, ["single-OS matrix", "no artifacts declared while a run stage exists"]);
}

#[test]
fn lint_unpinned_and_clean() {
    let unpinned = PipelineConfig::parse("language: python\nrun: [x]\n").unwrap();
    assert!(lint(&unpinned).iter().any(|d| d.message == "unpinned toolchain version"));

    let clean = PipelineConfig::parse(
        "language: python\npython: 3.6\nrun: [x]\nartifacts: ['*.csv']\nmatrix:\n  - os: linux\n  - os: macos\n",
    )
    .unwrap();
    assert!(lint(&clean).is_empty(), "{:?}", lint(&clean));

    let no_run = PipelineConfig::parse("test: [x]\nmatrix: [{os: linux}, {os: windows}]\n").unwrap();
    let msgs: Vec<_> = lint(&no_run).into_iter().map(|d| d.message).collect();
    assert_eq!(msgs, ["no run stage"]);
}

#[test]
fn canonical_round_trip_examples() {
    for src in [
        format!("{LISTING_1}{LISTING_2}"),
        "language: python\npython: 3.6\nenv: {X: \"a b\"}\nrun: [x]\nmatrix:\n  - env: {S: 0}\n  - os: macos\n    python: 3.8\n  - {}\nartifacts: ['*.csv']\n".to_string(),
    ] {
        let cfg = PipelineConfig::parse(&src).unwrap();
        let text = cfg.to_yaml();
        let again = PipelineConfig::parse(&text).unwrap();
        assert_eq!(again, cfg, "{text}");
        assert_eq!(again.to_yaml(), text);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn word() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9._-]{0,6}"
    }

    fn command() -> impl Strategy<Value = String> {
        "[a-z][ -~]{0,20}".prop_filter("non-empty after trim", |s| !s.trim().is_empty())
    }

    fn env_vars() -> impl Strategy<Value = BTreeMap<String, String>> {
        prop::collection::btree_map("[A-Z_][A-Z0-9_]{0,5}", "[ -~]{0,8}", 0..3)
    }

    fn os() -> impl Strategy<Value = Os> {
        prop_oneof![Just(Os::Linux), Just(Os::Macos), Just(Os::Windows)]
    }

    prop_compose! {
        fn config()(
            os in os(),
            dist in prop::option::of(word()),
            lang in prop::option::of(Just("python".to_string())),
            version in prop::option::of("[0-9]\\.[0-9]{1,2}"),
            env in env_vars(),
            stages in prop::collection::vec(prop::collection::vec(command(), 0..3), 6),
            matrix in prop::collection::vec((prop::option::of(os()), env_vars()), 0..4),
            patterns in prop::collection::vec("[a-z]{1,4}\\*?(/[a-z]{1,4}\\*?)?\\.(csv|txt)", 0..3),
            timeout in 1u32..500,
        ) -> PipelineConfig {
            let mut scripts = StageScripts::default();
            for (stage, cmds) in Stage::CONFIGURABLE.into_iter().zip(stages) {
                *scripts.get_mut(stage) = cmds;
            }
            if scripts.is_empty() {
                scripts.run = vec!["true".into()];
            }
            let language_version = if lang.is_some() { version } else { None };
            let mut entries: Vec<MatrixEntry> = Vec::new();
            for (os, env_vars) in matrix {
                let e = MatrixEntry { os, env_vars, ..Default::default() };
                if !entries.iter().any(|x| x == &e) {
                    entries.push(e);
                }
            }
            let base_env = EnvironmentSpec { os, dist, language: lang, language_version, env_vars: env };
            let mut cfg = PipelineConfig {
                base_env,
                stages: scripts,
                matrix: MatrixSpec { entries },
                artifacts: ArtifactSpec { patterns },
                timeout_minutes: timeout,
            };
            // Drop entries that collide after expansion.
            let mut kept: Vec<MatrixEntry> = Vec::new();
            let mut seen: Vec<EnvironmentSpec> = Vec::new();
            for e in std::mem::take(&mut cfg.matrix.entries) {
                let env = apply_entry(&cfg.base_env, &e);
                if !seen.contains(&env) {
                    seen.push(env);
                    kept.push(e);
                }
            }
            cfg.matrix.entries = kept;
            cfg
        }
    }

    proptest! {
        #[test]
        fn serialize_parse_is_fixed_point(cfg in config()) {
            let text = cfg.to_yaml();
            let parsed = PipelineConfig::parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_yaml(), text);
        }

        #[test]
        fn effective_stages_start_with_info_in_order(cfg in config()) {
            let stages = effective_stages(&cfg);
            prop_assert_eq!(stages[0], Stage::Info);
            prop_assert!(stages.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(stages[1..].iter().all(|s| !cfg.stages.get(*s).is_empty()));
        }

        #[test]
        fn expansion_size_and_determinism(cfg in config()) {
            let text = cfg.to_yaml();
            let a = expand_matrix(&PipelineConfig::parse(&text).unwrap());
            let b = expand_matrix(&PipelineConfig::parse(&text).unwrap());
            prop_assert_eq!(a.len(), cfg.matrix.entries.len().max(1));
            let ja: Vec<_> = a.iter().map(JobSpec::canonical_json).collect();
            let jb: Vec<_> = b.iter().map(JobSpec::canonical_json).collect();
            prop_assert_eq!(ja, jb);
            for (i, job) in a.iter().enumerate() {
                prop_assert_eq!(job.matrix_index as usize, i);
            }
        }
    }
}
