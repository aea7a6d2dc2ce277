pub mod config;
pub mod datasets;
pub mod pipeline;
pub mod report;
pub mod sweep;

/// Process exit status for a failed command: 3 for numeric failures inside
/// the library, 2 for everything else (missing files, bad config, ...).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use pow2prune::Error as E;
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<E>(),
            Some(
                E::Diverged(_)
                    | E::NonFiniteGradient { .. }
                    | E::ExponentOverflow { .. }
                    | E::ExponentUnderflow { .. }
            )
        )
    });
    if numeric {
        3
    } else {
        2
    }
}
