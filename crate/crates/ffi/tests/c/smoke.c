#include <stdio.h>
#include <string.h>
#include "forgeryscope.h"

int main(int argc, char **argv) {
    if (argc != 2) return 64;
    FsModel *model = NULL;
    if (fs_model_load("/nonexistent/model.ffck", &model) != FS_IO) return 10;
    if (fs_last_error_message() == NULL) return 11;
    if (fs_model_load(argv[1], &model) != FS_OK) return 12;
    size_t n = fs_model_input_size(model);
    unsigned char pixels[40 * 24 * 3];
    memset(pixels, 128, sizeof pixels);
    double mask[40 * 24];
    FsVerdict v;
    if (fs_analyze_rgb(model, pixels, 40, 24, &v, mask, 40 * 24) != FS_OK) return 13;
    if (v.p_fake < 0.0 || v.p_fake > 1.0) return 14;
    if (fs_forgery_type_name(v.forgery_type) == NULL) return 15;
    fs_model_free(model);
    printf("input=%zu p_fake=%f type=%s\n", n, v.p_fake, fs_forgery_type_name(v.forgery_type));
    return 0;
}
