#include <stdio.h>
#include <string.h>

#include "poolkv.h"

#define CHECK(expr)                                                       \
  do {                                                                    \
    PkvStatus st_ = (expr);                                               \
    if (st_ != PKV_STATUS_OK) {                                           \
      char msg_[256];                                                     \
      pkv_last_error(msg_, sizeof msg_);                                  \
      fprintf(stderr, "%s -> %d: %s\n", #expr, (int)st_, msg_);           \
      return 1;                                                           \
    }                                                                     \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) return 2;
  PkvPool *pool = NULL;
  CHECK(pkv_pool_create(argv[1], 16u << 20, 4, 4096, 2u << 20, &pool));

  PkvPoolInfo info;
  CHECK(pkv_pool_info(pool, &info));
  if (info.device_count != 4 || info.block_count != 4096) return 3;

  uint64_t block = 0;
  CHECK(pkv_pool_alloc_block(pool, &block));

  PkvSession *w = NULL, *r = NULL;
  CHECK(pkv_session_new(pool, &w));
  CHECK(pkv_session_new(pool, &r));
  const char text[] = "pooled bytes";
  char back[sizeof text] = {0};
  CHECK(pkv_session_bypass_write(w, block, (const uint8_t *)text, sizeof text));
  CHECK(pkv_session_read_fresh(r, block, (uint8_t *)back, sizeof back));
  if (memcmp(text, back, sizeof text) != 0) return 4;

  uint32_t tokens[16];
  for (uint32_t i = 0; i < 16; i++) tokens[i] = i;
  uint8_t hash[16];
  CHECK(pkv_chain_hash(NULL, tokens, 16, 16, hash));

  if (pkv_pool_free_block(pool, block + 1) != PKV_STATUS_INVALID_ARGUMENT) return 5;
  CHECK(pkv_pool_free_block(pool, block));

  pkv_session_free(w);
  pkv_session_free(r);
  pkv_pool_free(pool);
  for (int i = 0; i < 16; i++) printf("%02x", hash[i]);
  printf("\n");
  return 0;
}
