pub mod gradcheck_suite;
