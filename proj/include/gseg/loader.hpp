#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>

#include "gseg/data.hpp"
#include "gseg/tensor.hpp"

namespace gseg::data {

struct LoaderConfig {
    int workers = 0;               // 0 = synchronous, in-context loading
    int prefetch_per_worker = 2;   // buffered batches per producer
    bool persistent_workers = false;
    bool cache = false;            // decode + deterministic transform once, serve from RAM
    int batch_size = 16;
    int64_t shuffle_seed = 0;      // < 0 disables shuffling

    void validate() const {
        if (workers < 0) throw Error("loader: workers must be >= 0");
        if (prefetch_per_worker < 1) throw Error("loader: prefetch_per_worker must be >= 1");
        if (batch_size < 1) throw Error("loader: batch_size must be >= 1");
    }
};

struct SegBatch {
    Tensor images;  // N x 1 x H x W, intensity-normalized
    Tensor masks;   // N x 1 x H x W, strictly {0,1}
    int64_t size() const { return images.numel() ? images.shape[0] : 0; }
};

// Indexable slice source. `decode_delay_ms` models the I/O + decode cost a
// real dataset would pay per sample; the deterministic per-slice min-max
// normalization is applied here, mirroring a decode-time transform.
class SliceDataset {
public:
    SliceDataset() = default;
    explicit SliceDataset(std::vector<SlicePair> pairs, double decode_delay_ms = 0.0)
        : pairs_(std::move(pairs)), decode_delay_ms_(decode_delay_ms) {}

    size_t size() const { return pairs_.size(); }

    SlicePair load(size_t i) const {
        if (decode_delay_ms_ > 0.0)
            std::this_thread::sleep_for(
                std::chrono::duration<double, std::milli>(decode_delay_ms_));
        SlicePair sp = pairs_.at(i);
        minmax_normalize(sp.image);
        return sp;
    }

    const SlicePair& raw(size_t i) const { return pairs_.at(i); }

private:
    std::vector<SlicePair> pairs_;
    double decode_delay_ms_ = 0.0;
};

// optional random per-sample transform (augmentation); the Rng is seeded per
// (loader seed, epoch, sample index) so results do not depend on worker count
using SampleTransform = std::function<SlicePair(const SlicePair&, Rng&)>;

// Multi-producer/single-consumer batch pipeline. Batch b is produced by
// worker b % workers and consumed in index order, so every configuration
// yields the identical batch sequence for a fixed seed.
class BatchLoader {
public:
    BatchLoader(const SliceDataset& dataset, LoaderConfig cfg, SampleTransform transform = {})
        : ds_(&dataset), cfg_(cfg), transform_(std::move(transform)) {
        cfg_.validate();
        if (cfg_.cache) {
            cache_.reserve(ds_->size());
            for (size_t i = 0; i < ds_->size(); ++i) cache_.push_back(ds_->load(i));
            cache_bytes_ = 0;
            for (const auto& sp : cache_)
                cache_bytes_ += (sp.image.v.size() + sp.mask.v.size()) * sizeof(float) +
                                sp.patient_id.size() + sizeof(SlicePair);
        }
    }

    ~BatchLoader() { shutdown_workers(); }

    BatchLoader(const BatchLoader&) = delete;
    BatchLoader& operator=(const BatchLoader&) = delete;

    size_t batches_per_epoch() const {
        return (ds_->size() + static_cast<size_t>(cfg_.batch_size) - 1) /
               static_cast<size_t>(cfg_.batch_size);
    }

    size_t cache_bytes() const { return cache_bytes_; }

    // Runs one epoch, invoking `consume` for every batch in order. Worker
    // errors surface here, wrapped with the worker id.
    void run_epoch(int epoch, const std::function<void(SegBatch&&)>& consume) {
        std::vector<size_t> order(ds_->size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        if (cfg_.shuffle_seed >= 0) {
            Rng rng(static_cast<uint64_t>(cfg_.shuffle_seed) * 1000003ull +
                    static_cast<uint64_t>(epoch));
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.randint(i)]);
        }
        size_t nbatch = batches_per_epoch();

        if (cfg_.workers == 0) {
            for (size_t b = 0; b < nbatch; ++b) consume(make_batch(order, b, epoch));
            return;
        }

        start_epoch(std::move(order), epoch);
        for (size_t b = 0; b < nbatch; ++b) {
            Item item = queues_[b % queues_.size()]->pop();
            if (item.error) {
                shutdown_workers();
                std::rethrow_exception(item.error);
            }
            consume(std::move(item.batch));
        }
        finish_epoch();
    }

private:
    struct Item {
        SegBatch batch;
        std::exception_ptr error;
    };

    class BoundedQueue {
    public:
        explicit BoundedQueue(size_t cap) : cap_(cap) {}

        // returns false when the queue was closed while waiting
        bool push(Item&& item) {
            std::unique_lock lk(m_);
            cv_free_.wait(lk, [&] { return q_.size() < cap_ || closed_; });
            if (closed_) return false;
            q_.push_back(std::move(item));
            cv_avail_.notify_one();
            return true;
        }

        Item pop() {
            std::unique_lock lk(m_);
            cv_avail_.wait(lk, [&] { return !q_.empty(); });
            Item it = std::move(q_.front());
            q_.pop_front();
            cv_free_.notify_one();
            return it;
        }

        void close() {
            std::lock_guard lk(m_);
            closed_ = true;
            cv_free_.notify_all();
        }

        void reopen() {
            std::lock_guard lk(m_);
            closed_ = false;
            q_.clear();
        }

    private:
        std::mutex m_;
        std::condition_variable cv_avail_, cv_free_;
        std::deque<Item> q_;
        size_t cap_;
        bool closed_ = false;
    };

    SegBatch make_batch(const std::vector<size_t>& order, size_t b, int epoch) const {
        size_t begin = b * static_cast<size_t>(cfg_.batch_size);
        size_t end = std::min(begin + static_cast<size_t>(cfg_.batch_size), order.size());
        int64_t n = static_cast<int64_t>(end - begin);

        std::vector<SlicePair> samples;
        samples.reserve(static_cast<size_t>(n));
        for (size_t k = begin; k < end; ++k) {
            size_t idx = order[k];
            SlicePair sp = cfg_.cache ? cache_[idx] : ds_->load(idx);
            if (transform_) {
                Rng rng(hash_mix(static_cast<uint64_t>(cfg_.shuffle_seed < 0
                                                           ? 0
                                                           : cfg_.shuffle_seed),
                                 static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx)));
                sp = transform_(sp, rng);
            }
            samples.push_back(std::move(sp));
        }

        int64_t h = samples.front().image.h, w = samples.front().image.w;
        SegBatch batch;
        batch.images = Tensor({n, 1, h, w});
        batch.masks = Tensor({n, 1, h, w});
        for (int64_t i = 0; i < n; ++i) {
            const auto& sp = samples[static_cast<size_t>(i)];
            if (sp.image.h != h || sp.image.w != w)
                throw ShapeError("loader: mixed slice extents within a batch");
            std::copy(sp.image.v.begin(), sp.image.v.end(),
                      batch.images.data.begin() + static_cast<size_t>(i * h * w));
            std::copy(sp.mask.v.begin(), sp.mask.v.end(),
                      batch.masks.data.begin() + static_cast<size_t>(i * h * w));
        }
        return batch;
    }

    static uint64_t hash_mix(uint64_t a, uint64_t b, uint64_t c) {
        uint64_t h = 1469598103934665603ull;
        for (uint64_t v : {a, b, c}) {
            h ^= v + 0x9e3779b97f4a7c15ull;
            h *= 1099511628211ull;
        }
        return h;
    }

    void start_epoch(std::vector<size_t>&& order, int epoch) {
        size_t w = static_cast<size_t>(cfg_.workers);
        if (cfg_.persistent_workers && queues_.size() == w && !threads_.empty()) {
            // workers are parked on the generation gate; queues are drained
            for (auto& q : queues_) q->reopen();
            order_ = std::move(order);
            epoch_ = epoch;
            {
                std::lock_guard lk(gen_m_);
                ++generation_;
            }
            gen_cv_.notify_all();
            return;
        }
        shutdown_workers();
        queues_.clear();
        for (size_t i = 0; i < w; ++i)
            queues_.push_back(
                std::make_unique<BoundedQueue>(static_cast<size_t>(cfg_.prefetch_per_worker)));
        order_ = std::move(order);
        epoch_ = epoch;
        generation_ = 1;
        for (size_t i = 0; i < w; ++i)
            threads_.emplace_back([this, i] { worker_main(i); });
    }

    void finish_epoch() {
        if (!cfg_.persistent_workers) shutdown_workers();
    }

    void worker_main(size_t wid) {
        uint64_t seen_gen = 0;
        while (true) {
            {
                std::unique_lock lk(gen_m_);
                gen_cv_.wait(lk, [&] { return stop_.load() || generation_ > seen_gen; });
                if (stop_.load()) return;
                seen_gen = generation_;
            }
            size_t nbatch = batches_per_epoch();
            for (size_t b = wid; b < nbatch; b += queues_.size()) {
                Item item;
                try {
                    item.batch = make_batch(order_, b, epoch_);
                } catch (...) {
                    try {
                        std::throw_with_nested(
                            Error("loader worker " + std::to_string(wid) + " failed"));
                    } catch (...) {
                        item.error = std::current_exception();
                    }
                }
                if (!queues_[wid]->push(std::move(item))) break;  // closed: bail out
            }
            if (!cfg_.persistent_workers) return;
        }
    }

    void shutdown_workers() {
        stop_.store(true);
        for (auto& q : queues_) q->close();
        gen_cv_.notify_all();
        for (auto& t : threads_)
            if (t.joinable()) t.join();
        threads_.clear();
        stop_.store(false);
    }

    const SliceDataset* ds_;
    LoaderConfig cfg_;
    SampleTransform transform_;
    std::vector<SlicePair> cache_;
    size_t cache_bytes_ = 0;

    std::vector<std::unique_ptr<BoundedQueue>> queues_;
    std::vector<std::thread> threads_;
    std::vector<size_t> order_;
    int epoch_ = 0;
    std::atomic<bool> stop_{false};
    std::mutex gen_m_;
    std::condition_variable gen_cv_;
    uint64_t generation_ = 0;
};

}  // namespace gseg::data
