//! Checks over the shipped replica suites as data: they load, they are
//! statically clean, and the on-disk format round-trips.

mod common;

use shelljudge::suite::{self, Suite};

#[test]
fn shipped_suites_load_cleanly() {
    let single = suite::load_suite(&common::suite_dir("bash-single")).unwrap();
    let multi = suite::load_suite(&common::suite_dir("bash-multi")).unwrap();
    let ps = suite::load_suite(&common::suite_dir("powershell")).unwrap();
    assert_eq!(single.len(), 9);
    assert_eq!(multi.len(), 3);
    assert_eq!(ps.len(), 2);
    assert!(single.iter().all(|c| c.suite == Suite::SingleLineBash));
    assert!(multi.iter().all(|c| c.suite == Suite::MultiLineBash));
    assert!(ps.iter().all(|c| c.suite == Suite::PowerShell));
    // Replica scale: at least 14 cases in total.
    assert!(single.len() + multi.len() + ps.len() >= 14);
}

#[test]
fn shipped_suites_validate_with_zero_issues() {
    for name in ["bash-single", "bash-multi", "powershell"] {
        let cases = suite::load_suite(&common::suite_dir(name)).unwrap();
        let issues = suite::validate_suite(&cases);
        assert!(
            issues.is_empty(),
            "suite {name} has validation issues: {issues:?}"
        );
    }
}

#[test]
fn shipped_cases_round_trip_through_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["bash-single", "bash-multi", "powershell"] {
        let cases = suite::load_suite(&common::suite_dir(name)).unwrap();
        for (i, case) in cases.iter().enumerate() {
            let out = dir.path().join(name).join(format!("test{:03}", i + 1));
            suite::save_test_case(case, &out).unwrap();
            let reloaded = suite::load_test_case(&out).unwrap();
            assert_eq!(case, &reloaded, "{} did not round-trip", case.id);
        }
        // The re-serialized suite loads as a whole too.
        let reloaded = suite::load_suite(&dir.path().join(name)).unwrap();
        assert_eq!(reloaded, cases);
    }
}

#[test]
fn shipped_pools_parse_and_are_large_enough_for_ten_shot() {
    for suite in [
        Suite::SingleLineBash,
        Suite::MultiLineBash,
        Suite::PowerShell,
    ] {
        let path = common::pools_dir().join(shelljudge::orchestrator::pool_file_name(suite));
        let pool = shelljudge::prompt::load_pool(&path).unwrap();
        assert!(
            pool.len() >= 11,
            "{path:?} must support 10-shot sampling even after excluding a target"
        );
        // Pairwise distinct questions.
        let mut questions: Vec<&str> = pool.iter().map(|e| e.question.as_str()).collect();
        questions.sort();
        questions.dedup();
        assert_eq!(questions.len(), pool.len());
    }
}

#[test]
fn shipped_ids_follow_the_suite_prefix_convention() {
    for (name, prefix) in [
        ("bash-single", "bash1/"),
        ("bash-multi", "bash2/"),
        ("powershell", "ps1/"),
    ] {
        let cases = suite::load_suite(&common::suite_dir(name)).unwrap();
        for case in cases {
            assert!(
                case.id.starts_with(prefix),
                "{} does not start with {prefix}",
                case.id
            );
        }
    }
}
