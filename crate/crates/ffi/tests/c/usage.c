#include "move.h"

int load_and_describe(const char *path, MoveModelInfo *info) {
  MoveModel *model = NULL;
  MoveStatus s = move_model_load(path, &model);
  if (s != MOVE_STATUS_OK) {
    return (int)s;
  }
  s = move_model_info(model, info);
  move_model_free(model);
  return (int)s;
}
