use std::path::Path;

use gearmpc::vehicle::VehicleParams;

#[test]
fn shipped_profile_matches_the_built_in_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles/default_vehicle.json");
    let loaded = VehicleParams::from_json_file(&path, false).unwrap();
    assert_eq!(loaded, VehicleParams::default());
}
