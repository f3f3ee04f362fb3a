#include <catch2/catch_amalgamated.hpp>

#include "gseg/loader.hpp"

#include <chrono>
#include <numeric>

using namespace gseg;
using namespace gseg::data;

namespace {

std::vector<SlicePair> tiny_slices(int n, int side = 8, uint64_t seed = 3) {
    return generate_phantoms(n, std::max(side, 16), seed);
}

// multiset fingerprint of all yielded samples (order-insensitive)
double epoch_fingerprint(BatchLoader& loader, int epoch, size_t* batches = nullptr,
                         std::vector<int64_t>* sizes = nullptr) {
    double acc = 0.0;
    size_t count = 0;
    loader.run_epoch(epoch, [&](SegBatch&& b) {
        ++count;
        if (sizes) sizes->push_back(b.size());
        for (float v : b.images.data) acc += static_cast<double>(v) * 31.0;
        for (float v : b.masks.data) acc += v;
    });
    if (batches) *batches = count;
    return acc;
}

}  // namespace

TEST_CASE("loader yields ceil(n/batch) batches and keeps the partial tail") {
    SliceDataset ds(tiny_slices(100));
    LoaderConfig cfg;
    cfg.batch_size = 16;
    BatchLoader loader(ds, cfg);
    size_t batches = 0;
    std::vector<int64_t> sizes;
    epoch_fingerprint(loader, 0, &batches, &sizes);
    CHECK(batches == 7);
    CHECK(sizes.back() == 4);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), int64_t{0}) == 100);
}

TEST_CASE("cache on vs off yields the identical sample multiset") {
    SliceDataset ds(tiny_slices(33));
    LoaderConfig cfg;
    cfg.batch_size = 8;
    cfg.shuffle_seed = 5;
    BatchLoader plain(ds, cfg);
    cfg.cache = true;
    BatchLoader cached(ds, cfg);
    CHECK(epoch_fingerprint(plain, 2) == epoch_fingerprint(cached, 2));
    CHECK(cached.cache_bytes() > 0);
}

TEST_CASE("worker counts 0/1/4/6/8 yield the same epoch content") {
    SliceDataset ds(tiny_slices(50));
    std::vector<double> prints;
    for (int workers : {0, 1, 4, 6, 8}) {
        LoaderConfig cfg;
        cfg.batch_size = 8;
        cfg.shuffle_seed = 11;
        cfg.workers = workers;
        BatchLoader loader(ds, cfg);
        prints.push_back(epoch_fingerprint(loader, 1));
    }
    for (double p : prints) CHECK(p == prints[0]);
}

TEST_CASE("persistent workers survive epochs and match non-persistent output") {
    SliceDataset ds(tiny_slices(40));
    LoaderConfig cfg;
    cfg.batch_size = 8;
    cfg.shuffle_seed = 7;
    cfg.workers = 2;
    cfg.persistent_workers = true;
    BatchLoader persistent(ds, cfg);
    cfg.persistent_workers = false;
    BatchLoader oneshot(ds, cfg);
    for (int epoch = 0; epoch < 3; ++epoch)
        CHECK(epoch_fingerprint(persistent, epoch) == epoch_fingerprint(oneshot, epoch));
}

TEST_CASE("shuffling changes batch composition across epochs but not content") {
    SliceDataset ds(tiny_slices(24));
    LoaderConfig cfg;
    cfg.batch_size = 6;
    cfg.shuffle_seed = 1;
    BatchLoader loader(ds, cfg);

    std::vector<float> first_batch_e0, first_batch_e1;
    bool grabbed = false;
    loader.run_epoch(0, [&](SegBatch&& b) {
        if (!grabbed) {
            first_batch_e0 = b.images.data;
            grabbed = true;
        }
    });
    grabbed = false;
    loader.run_epoch(1, [&](SegBatch&& b) {
        if (!grabbed) {
            first_batch_e1 = b.images.data;
            grabbed = true;
        }
    });
    CHECK(first_batch_e0 != first_batch_e1);
    CHECK(epoch_fingerprint(loader, 0) == Catch::Approx(epoch_fingerprint(loader, 1)));
}

TEST_CASE("augmentation transform applies identically for any worker count") {
    SliceDataset ds(tiny_slices(30));
    auto aug = [](const SlicePair& sp, Rng& rng) { return augment(sp, rng); };
    std::vector<double> prints;
    for (int workers : {0, 3}) {
        LoaderConfig cfg;
        cfg.batch_size = 4;
        cfg.shuffle_seed = 13;
        cfg.workers = workers;
        BatchLoader loader(ds, cfg, aug);
        prints.push_back(epoch_fingerprint(loader, 2));
    }
    CHECK(prints[0] == prints[1]);
}

TEST_CASE("cached epochs beat a 5 ms decode cost by at least 2x") {
    // desk-size variant of the acceptance benchmark: 60 samples, 2 epochs
    SliceDataset ds(tiny_slices(60), 5.0);
    LoaderConfig cfg;
    cfg.batch_size = 10;

    auto time_epochs = [&](BatchLoader& loader) {
        auto t0 = std::chrono::steady_clock::now();
        for (int e = 0; e < 2; ++e) loader.run_epoch(e, [](SegBatch&&) {});
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    BatchLoader uncached(ds, cfg);
    double t_plain = time_epochs(uncached);
    cfg.cache = true;
    BatchLoader cached(ds, cfg);  // population cost paid here, outside the epoch timer
    double t_cached = time_epochs(cached);
    INFO("uncached " << t_plain << "s cached " << t_cached << "s");
    CHECK(t_plain >= 2.0 * t_cached);
}

TEST_CASE("cache memory footprint stays within 1.1x of the decoded payload") {
    auto slices = tiny_slices(64, 16);
    SliceDataset ds(slices);
    LoaderConfig cfg;
    cfg.cache = true;
    BatchLoader loader(ds, cfg);

    size_t payload = 0;
    for (const auto& sp : slices)
        payload += (sp.image.v.size() + sp.mask.v.size()) * sizeof(float) +
                   sp.patient_id.size() + sizeof(SlicePair);
    CHECK(loader.cache_bytes() <= static_cast<size_t>(1.1 * static_cast<double>(payload)));
}

TEST_CASE("worker failures propagate with the worker's cause") {
    struct Hostile : SliceDataset {
        // dataset whose 7th sample decode explodes
    };
    auto slices = tiny_slices(20);
    SliceDataset ds(slices);
    auto bomb = [](const SlicePair& sp, Rng&) -> SlicePair {
        if (sp.slice_index == 3) throw std::runtime_error("decode exploded");
        return sp;
    };
    LoaderConfig cfg;
    cfg.batch_size = 4;
    cfg.workers = 2;
    BatchLoader loader(ds, cfg, bomb);
    bool threw = false;
    try {
        loader.run_epoch(0, [](SegBatch&&) {});
    } catch (const Error& e) {
        threw = true;
        CHECK(std::string(e.what()).find("worker") != std::string::npos);
        bool nested_seen = false;
        try {
            std::rethrow_if_nested(e);
        } catch (const std::runtime_error& inner) {
            nested_seen = std::string(inner.what()).find("exploded") != std::string::npos;
        }
        CHECK(nested_seen);
    }
    CHECK(threw);
}

TEST_CASE("loader config validation") {
    SliceDataset ds(tiny_slices(4));
    LoaderConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(BatchLoader(ds, cfg), Error);
    cfg.batch_size = 2;
    cfg.workers = -1;
    CHECK_THROWS_AS(BatchLoader(ds, cfg), Error);
}
