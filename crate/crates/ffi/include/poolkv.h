#ifndef POOLKV_H
#define POOLKV_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. `PKV_STATUS_OK` is zero.
 */
typedef enum PkvStatus {
  PKV_STATUS_OK = 0,
  PKV_STATUS_NULL_ARGUMENT = 1,
  PKV_STATUS_INVALID_ARGUMENT = 2,
  PKV_STATUS_IO = 3,
  PKV_STATUS_OUT_OF_RANGE = 4,
  PKV_STATUS_OUT_OF_SPACE = 5,
  PKV_STATUS_NOT_FOUND = 6,
  PKV_STATUS_ALREADY_EXISTS = 7,
  PKV_STATUS_TIMEOUT = 8,
  PKV_STATUS_REMOTE = 9,
  PKV_STATUS_BUFFER_TOO_SMALL = 10,
  PKV_STATUS_PANIC = 11,
} PkvStatus;

/**
 * Opaque pool handle.
 */
typedef struct PkvPool PkvPool;

/**
 * Opaque RPC client handle. Holds a reference to its pool.
 */
typedef struct PkvRpcClient PkvRpcClient;

/**
 * Opaque coherent-session handle. Holds a reference to its pool.
 */
typedef struct PkvSession PkvSession;

/**
 * Geometry of an attached pool.
 */
typedef struct PkvPoolInfo {
  uint64_t pool_bytes;
  uint32_t device_count;
  bool interleave;
  uint64_t chunk_bytes;
  uint64_t block_bytes;
  uint64_t block_count;
  uint64_t live_blocks;
} PkvPoolInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pkv_last_error(char *buf, size_t len);

/**
 * Creates a file-backed pool at `path` and returns a handle in `out`.
 * A zero `chunk_bytes` selects linear placement.
 *
 * # Safety
 * `path` must be a NUL-terminated string. `out` must be writable.
 */
enum PkvStatus pkv_pool_create(const char *path,
                               uint64_t pool_bytes,
                               uint32_t device_count,
                               uint64_t block_bytes,
                               uint64_t chunk_bytes,
                               struct PkvPool **out);

/**
 * Attaches to an existing pool at `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string. `out` must be writable.
 */
enum PkvStatus pkv_pool_attach(const char *path, struct PkvPool **out);

/**
 * Releases a pool handle. The mapping stays alive while sessions or
 * clients created from it exist. Null is ignored.
 *
 * # Safety
 * `pool` must be null or a handle not yet freed.
 */
void pkv_pool_free(struct PkvPool *pool);

/**
 * Fills `info` with the pool geometry.
 *
 * # Safety
 * `pool` must be a live handle and `info` writable.
 */
enum PkvStatus pkv_pool_info(const struct PkvPool *pool, struct PkvPoolInfo *info);

/**
 * Maps a logical pool offset to its device index and device-local offset.
 *
 * # Safety
 * `pool` must be a live handle; `device` and `device_offset` writable.
 */
enum PkvStatus pkv_pool_translate(const struct PkvPool *pool,
                                  uint64_t offset,
                                  uint32_t *device,
                                  uint64_t *device_offset);

/**
 * Allocates one block and writes its pool offset to `offset`.
 *
 * # Safety
 * `pool` must be a live handle and `offset` writable.
 */
enum PkvStatus pkv_pool_alloc_block(const struct PkvPool *pool, uint64_t *offset);

/**
 * Frees the block starting at `offset`.
 *
 * # Safety
 * `pool` must be a live handle.
 */
enum PkvStatus pkv_pool_free_block(const struct PkvPool *pool, uint64_t offset);

/**
 * Copies per-device written byte counters into `out`. `len` must be at
 * least the device count. `written` receives the device count.
 *
 * # Safety
 * `pool` must be a live handle, `out` must hold `len` u64 values and
 * `written` must be writable.
 */
enum PkvStatus pkv_pool_device_load(const struct PkvPool *pool,
                                    uint64_t *out,
                                    size_t len,
                                    size_t *written);

/**
 * Opens a coherent session with a private host cache over `pool`.
 *
 * # Safety
 * `pool` must be a live handle and `out` writable.
 */
enum PkvStatus pkv_session_new(const struct PkvPool *pool, struct PkvSession **out);

/**
 * Releases a session without flushing dirty lines. Null is ignored.
 *
 * # Safety
 * `session` must be null or a handle not yet freed.
 */
void pkv_session_free(struct PkvSession *session);

/**
 * Writes `len` bytes at `offset` straight to the pool, dropping any cached
 * copy of the touched lines.
 *
 * # Safety
 * `session` must be a live handle; `data` must hold `len` readable bytes.
 */
enum PkvStatus pkv_session_bypass_write(struct PkvSession *session,
                                        uint64_t offset,
                                        const uint8_t *data,
                                        size_t len);

/**
 * Writes through the host cache. Data reaches the pool on flush or eviction.
 *
 * # Safety
 * `session` must be a live handle; `data` must hold `len` readable bytes.
 */
enum PkvStatus pkv_session_cached_write(struct PkvSession *session,
                                        uint64_t offset,
                                        const uint8_t *data,
                                        size_t len);

/**
 * Writes back dirty cached lines overlapping `[offset, offset + len)`.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum PkvStatus pkv_session_flush(struct PkvSession *session, uint64_t offset, uint64_t len);

/**
 * Reads `len` bytes at `offset`, observing every write that reached the
 * pool before the call.
 *
 * # Safety
 * `session` must be a live handle; `out` must hold `len` writable bytes.
 */
enum PkvStatus pkv_session_read_fresh(struct PkvSession *session,
                                      uint64_t offset,
                                      uint8_t *out,
                                      size_t len);

/**
 * Computes the chained hash of one full block of `n_tokens` tokens.
 * `parent` is null for the first block. Hashes are 16 little-endian bytes.
 *
 * # Safety
 * `parent` must be null or point to 16 bytes, `tokens` to `n_tokens`
 * values and `out` to 16 writable bytes.
 */
enum PkvStatus pkv_chain_hash(const uint8_t *parent,
                              const uint32_t *tokens,
                              size_t n_tokens,
                              size_t block_tokens,
                              uint8_t *out);

/**
 * Lays out RPC channel `id` with `slot_count` slots of `payload_bytes`
 * request and response space.
 *
 * # Safety
 * `pool` must be a live handle.
 */
enum PkvStatus pkv_rpc_channel_create(const struct PkvPool *pool,
                                      uint32_t id,
                                      uint32_t slot_count,
                                      uint32_t payload_bytes);

/**
 * Serves echo requests on channel `id` until `duration_ms` elapses.
 * Blocks the calling thread.
 *
 * # Safety
 * `pool` must be a live handle.
 */
enum PkvStatus pkv_rpc_serve_echo(const struct PkvPool *pool, uint32_t id, uint64_t duration_ms);

/**
 * Attaches an RPC client to channel `id`.
 *
 * # Safety
 * `pool` must be a live handle and `out` writable.
 */
enum PkvStatus pkv_rpc_client_new(const struct PkvPool *pool,
                                  uint32_t id,
                                  struct PkvRpcClient **out);

/**
 * Releases an RPC client. Null is ignored.
 *
 * # Safety
 * `client` must be null or a handle not yet freed.
 */
void pkv_rpc_client_free(struct PkvRpcClient *client);

/**
 * Sends one request and waits for its response. `resp_len` receives the
 * response length; when it exceeds `resp_cap` the call fails with
 * `BufferTooSmall` and nothing is copied.
 *
 * # Safety
 * `client` must be a live handle, `req` must hold `req_len` bytes, `resp`
 * must hold `resp_cap` writable bytes and `resp_len` must be writable.
 */
enum PkvStatus pkv_rpc_call(struct PkvRpcClient *client,
                            const uint8_t *req,
                            size_t req_len,
                            uint8_t *resp,
                            size_t resp_cap,
                            size_t *resp_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POOLKV_H */
