#pragma once

#include <string>

#include "bpc/gaussian.hpp"
#include "bpc/model.hpp"

namespace bpc {

// raw binary dataset: magic "BPCD", version u32, count u64, dim u64,
// has-labels u8, then f64 little-endian features row-major, then i64 labels
void save_dataset_bpcd(const std::string& path, const Dataset& data);
Dataset load_dataset_bpcd(const std::string& path);

// text dataset: one csv row per datum, features first, integer label last
// when labels are present; no header row
void save_dataset_csv(const std::string& path, const Dataset& data);
Dataset load_dataset_csv(const std::string& path, bool has_labels);

// gaussian as json: {"mean": [...], "cov": {"kind": "isotropic", "variance": v}}
// with "diagonal"/"variances" and "full"/"matrix" (nested rows) variants
void save_gaussian_json(const std::string& path, const GaussianApprox& g);
GaussianApprox load_gaussian_json(const std::string& path);

}  // namespace bpc
