#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dadpo/pipeline.hpp"

namespace dadpo {

/// Entry point of the `dadpo` tool. 0 on success, 1 on runtime errors, 2 on
/// usage errors. Failures end with one JSON line on stderr:
///   {"error":{"kind":"io_error","message":"..."}}
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// One CSV row per manifest, ordered by (method, beta, beta1, beta2,
/// kl_weight, seed). Columns:
///   method,beta,beta1,beta2,kl_weight,seed,final_loss,omega,n_win,n_lose,n_tie,n_errors,wall_time_s,final_hash
std::string report_csv(const std::vector<RunManifest>& manifests);

/// Loads every manifest path and writes report_csv to `out_path`.
void emit_report(const std::vector<std::string>& manifest_paths, const std::string& out_path);

}  // namespace dadpo
