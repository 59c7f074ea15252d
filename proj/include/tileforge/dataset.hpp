#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tileforge/tiler.hpp"

namespace tileforge {

struct DatasetError : std::runtime_error { using std::runtime_error::runtime_error; };
struct InsufficientSlides : DatasetError { using DatasetError::DatasetError; };
struct EmptyClass : DatasetError { using DatasetError::DatasetError; };
struct EmptyCohort : DatasetError { using DatasetError::DatasetError; };

enum class Split { UNASSIGNED, TRAIN, VAL, TEST, HELDOUT_WSI, DISCARDED };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string store_dir;   // tile store holding the pixels
    size_t record_index = 0; // index into that store's tiles.jsonl
    std::string slide_id;
    std::string patient_id;
    int grid_x = 0, grid_y = 0;
    TileLabel label = TileLabel::NON_PROGRESSOR;
    Split split = Split::UNASSIGNED;
    std::optional<RejectReason> discard_reason;

    uint64_t uid() const {
        uint64_t h = fnv1a64(slide_id);
        h = hash_combine(h, static_cast<uint64_t>(grid_y));
        return hash_combine(h, static_cast<uint64_t>(grid_x));
    }
};

struct Provenance {
    std::array<int64_t, 2> pre_balance{0, 0};  // [non-progressor, progressor]
    std::array<int64_t, 2> post_balance{0, 0};
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    uint64_t seed = 0;
    std::array<double, 3> fractions{0.70, 0.15, 0.15};
    Provenance provenance;

    std::map<Split, std::array<int64_t, 2>> counts() const; // per split, per class
};

// Collect kept tiles from the given tile stores.
DatasetManifest manifest_from_stores(const std::vector<std::filesystem::path>& store_dirs);

// Withhold n slides per class (distinct patients) for whole-slide evaluation.
DatasetManifest holdout_slides(DatasetManifest m, int n_per_class, uint64_t seed);

// Undersample the majority class among non-heldout tiles to the minority count.
DatasetManifest balance_undersample(DatasetManifest m, uint64_t seed);

// Per-class split; VAL and TEST take the floor, TRAIN the remainder.
DatasetManifest stratified_split(DatasetManifest m, std::array<double, 3> fractions,
                                 uint64_t seed);

DatasetManifest filter_with_model(DatasetManifest m,
                                  const std::function<bool(const ManifestEntry&)>& keep);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Deterministic Fisher-Yates on indices, independent of the standard library's
// distribution implementation.
void seeded_shuffle(std::vector<size_t>& idx, uint64_t seed);

struct PatientRecord {
    std::string patient_id;
    TileLabel cohort = TileLabel::NON_PROGRESSOR;
    int age_years = 0;
    int n_biopsies = 1;
    int screening_interval_days = 0;
};

struct CohortSummary {
    double median_age = 0;
    int age_min = 0, age_max = 0;
    double mean_biopsies = 0;        // rounded to 2 decimals
    double mean_interval_days = 0;   // rounded to 2 decimals
};

std::vector<PatientRecord> load_patients_csv(const std::filesystem::path& path);
void save_patients_csv(const std::filesystem::path& path,
                       const std::vector<PatientRecord>& patients);

std::map<TileLabel, CohortSummary> cohort_summary(const std::vector<PatientRecord>& patients);

} // namespace tileforge
